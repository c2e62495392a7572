//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid input to {context}: {message}")]
    Invalid { context: String, message: String },

    #[error("checkpoint error at {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("feature extractor '{id}' failed: {message}")]
    Extractor { id: String, message: String },

    #[error("training diverged at iteration {iteration} (non-finite loss); last good checkpoint: {last_checkpoint:?}")]
    Diverged {
        iteration: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("non-finite values detected in {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: &str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context: context.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn invalid(context: &str, message: impl ToString) -> Self {
        Error::Invalid {
            context: context.to_string(),
            message: message.to_string(),
        }
    }
}
