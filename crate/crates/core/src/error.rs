//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GzslError>;

#[derive(Debug, Error)]
pub enum GzslError {
    /// Incompatible dimensions between operands.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Softmax over a vector with no finite entry.
    #[error("empty support")]
    EmptySupport,

    /// A precondition on an argument was violated.
    #[error("{0}")]
    InvalidArgument(String),

    /// Malformed input file.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Bad run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A stage was started without its prerequisite checkpoint.
    #[error("missing {0} checkpoint")]
    MissingCheckpoint(String),

    /// Corrupt or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("divergence: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GzslError {
    pub fn shape(msg: impl Into<String>) -> Self {
        GzslError::ShapeMismatch(msg.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        GzslError::InvalidArgument(msg.into())
    }
}
