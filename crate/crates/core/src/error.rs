use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
///
/// Numerical degeneracies that a rollout can survive (clamped pressure,
/// zero-mass predictions) are reported as events, not errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("data format error in `{dataset}`: {reason}")]
    Format { dataset: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical divergence: {0}")]
    Diverged(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(dataset: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            dataset: dataset.into(),
            reason: reason.into(),
        }
    }

    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
