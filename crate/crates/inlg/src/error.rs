use thiserror::Error;

/// Crate-wide error type.
///
/// `Contract` marks violated preconditions (shape mismatches, empty masks),
/// `NumericFault` non-finite values discovered mid-computation. Everything
/// else is I/O or data-format trouble.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault at graph node {node}: {detail}")]
    NumericFault { node: usize, detail: String },

    #[error("ingest error at line {line}: {msg}")]
    Ingest { line: usize, msg: String },

    #[error("dangling feature reference: example {example} points at missing feature id {feature_id}")]
    DanglingFeature { example: String, feature_id: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("sequence for example {example} needs {required} positions but max_positions is {max}")]
    LengthOverflow {
        example: String,
        required: usize,
        max: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
