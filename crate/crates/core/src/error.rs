//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the training stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tensor value became NaN or infinite.
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// Invalid argument outside of shape conformance.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Configuration file or key problem.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or fixture content problem.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint serialization problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
