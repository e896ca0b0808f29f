use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape disagreement (matmul inner dims, batch widths, ...).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid hyperparameter or generator configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed dataset file or contract violation in data handling.
    #[error("data error: {0}")]
    Data(String),

    /// Misuse of the gradient tape (non-scalar loss, repeated backward).
    #[error("tape error: {0}")]
    Tape(String),

    /// Numerically degenerate input where the operation has no answer
    /// (rank-0 weight matrix, zero covariance, parallel basis vectors).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Corrupt or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
