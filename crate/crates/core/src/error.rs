use std::path::PathBuf;

use thiserror::Error;

/// Every failure surfaced by the library.
///
/// The variants map onto the process exit codes used by the command-line
/// front end (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("validation failed for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("parse error in `{field}`: {reason}")]
    Parse { field: String, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn parse(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn non_finite(location: impl Into<String>) -> Self {
        Error::NonFinite {
            location: location.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 is success; 1 is reserved for I/O and other unexpected failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Validation { .. } | Error::Parse { .. } => 2,
            Error::Integrity(_) => 3,
            Error::NonFinite { .. } => 4,
            Error::Io { .. } => 1,
        }
    }
}
