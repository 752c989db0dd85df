use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A user-supplied spec or config value is out of its allowed range.
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    /// Malformed or inconsistent dataset on disk.
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// A caller broke an operation's precondition (shapes, label ranges, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite `{term}` loss at iteration {iteration}")]
    NonFinite { iteration: usize, term: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 training, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Validation { .. } => 1,
            Error::Load { .. } | Error::Contract(_) => 2,
            Error::NonFinite { .. } | Error::Tensor(_) => 3,
            Error::Io(_) | Error::Checkpoint { .. } => 4,
        }
    }
}
