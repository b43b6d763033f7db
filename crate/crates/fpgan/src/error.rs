//! Error taxonomy shared across the crate.
//!
//! Every failure class maps to one CLI exit code (see `cli`): usage errors
//! exit 1, data/format errors exit 2, training divergence exits 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("version error: expected version {expected}, found {found}")]
    Version { expected: u8, found: u8 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("divergence error: non-finite loss at step {step} ({which})")]
    Divergence { step: u64, which: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Exit code class used by the CLI: 1 usage, 2 data/format, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
