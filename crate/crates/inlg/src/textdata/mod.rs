//! Vocabulary, corpus ingestion, feature storage, batching, and the
//! synthetic grounded-world generator.

pub mod batching;
pub mod corpus;
pub mod synthetic;
pub mod vocab;

pub use batching::{make_batches, Batch};
pub use corpus::{
    load_corpus, load_corpus_with_vocab, load_prompts, read_features, write_features, Example,
    FeatureTable, Prompt,
};
pub use synthetic::{gen_synthetic, write_world, SyntheticWorld, SyntheticWorldSpec};
pub use vocab::{Vocab, VocabMode, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
