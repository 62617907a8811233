//! Dense-tensor numerical core: reverse-mode differentiation, AdamW-style
//! optimization, warmup schedule, seeded RNG, and checkpoint serialization.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::grad_check;
pub use graph::{Graph, InfoNceMode, NodeId};
pub use optim::{clip_global_norm, AdamConfig, LrSchedule, OptimizerState};
pub use rng::{Rng, SeedSplitter};
pub use tensor::Tensor;
