//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A domain invariant or precondition was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file did not match its documented schema.
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Invalid configuration value or inconsistent config/checkpoint pair.
    #[error("config error: {0}")]
    Config(String),

    /// A failure during training or inference (e.g. divergent loss).
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CoreError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Parse { path: path.into(), detail: detail.into() }
    }

    /// True for errors a caller should report as bad input rather than as an
    /// internal failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CoreError::Validation(_) | CoreError::Parse { .. } | CoreError::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
