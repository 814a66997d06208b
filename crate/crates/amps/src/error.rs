use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum AmpsError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("vocabulary id {id} out of range (size {size})")]
    OutOfVocab { id: usize, size: usize },

    #[error("cache/config mismatch: {0}")]
    CacheMismatch(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AmpsError>;
