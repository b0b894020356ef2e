use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor math, network construction and training.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {context} at iteration {iter}")]
    NonFinite { context: String, iter: u64 },

    #[error("mask generation failed after {attempts} attempts for group {group}")]
    MaskGeneration { attempts: usize, group: String },
}

impl Error {
    pub fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
