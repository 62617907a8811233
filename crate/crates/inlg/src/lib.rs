//! Visually-guided open-ended text generation at desk scale.
//!
//! A decoder-only language model is conditioned on a *visual prefix*: a
//! short sequence of continuous vectors produced from an external feature
//! vector by a trainable mapping network. Training combines teacher forcing
//! with an epoch-gated InfoNCE term that pulls each feature toward the
//! projected sentence representation of its own target text and away from
//! the rest of the batch. Decoding is beam search; evaluation covers the
//! usual degeneration metrics (rep-n, diversity, distinct-n).
//!
//! Modules:
//! - [`numcore`]: tensors, reverse-mode autodiff, optimizer, schedules, RNG,
//!   checkpoints
//! - [`textdata`]: vocabulary, corpora, feature files, batching, the
//!   synthetic grounded world
//! - [`model`]: the decoder LM, mapping networks, projection head
//! - [`objectives`]: teacher forcing, InfoNCE, the two-phase combination
//! - [`training`]: mapping pretraining and downstream finetuning
//! - [`decoding`]: beam search and batch generation
//! - [`metrics`]: rep-n / diversity / distinct-n reports

pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod objectives;
pub mod textdata;
pub mod training;

pub use error::{Error, Result};
