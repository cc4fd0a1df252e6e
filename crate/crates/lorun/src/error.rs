//! Error type shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LorunError>;

#[derive(Debug, Error)]
pub enum LorunError {
    /// Shape or axis mismatch in tensor arithmetic or operator geometry.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration value or unusable argument combination.
    #[error("config error: {0}")]
    Config(String),

    /// Violation of an operation contract (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// Iterative solver failed to reach its residual target.
    #[error("solver did not converge: {0}")]
    Numeric(String),

    /// Malformed on-disk data; `offset` is the byte position of the failure.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LorunError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LorunError::Io {
            path: path.into(),
            source,
        }
    }
}
