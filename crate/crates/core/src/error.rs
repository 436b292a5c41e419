//! Crate-wide error type.

use std::path::PathBuf;

use chrono::{DateTime, Utc};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate channel '{channel}': {reason}")]
    DegenerateChannel { channel: String, reason: String },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("numeric failure at {context}")]
    NumericFailure { context: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checksum mismatch in {path}")]
    ChecksumMismatch { path: PathBuf },

    #[error("format version {found} in {path}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("not found: {path}")]
    NotFound { path: PathBuf },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("time alignment: {0}")]
    Alignment(String),

    #[error("missing ensemble members initialized at {times:?}")]
    MissingInits { times: Vec<DateTime<Utc>> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
