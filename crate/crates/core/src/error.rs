use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("frozen parameter `{0}` changed during training")]
    FrozenDrift(String),

    #[error("model has not been trained: {0}")]
    Untrained(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures that come from numerics rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::FrozenDrift(_) | Error::Domain(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
