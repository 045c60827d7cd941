//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input data that violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// An API called out of contract (non-scalar backward root, missing grad, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("unknown {kind} `{name}`; available: {}", available.join(", "))]
    Lookup {
        kind: String,
        name: String,
        available: Vec<String>,
    },

    #[error("{kind} `{name}` is already registered")]
    Conflict { kind: String, name: String },

    /// Malformed binary input such as a bad PPM header.
    #[error("format error: {0}")]
    Format(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("sequence of length {len} exceeds the limit of {max}")]
    Length { len: usize, max: usize },

    #[error("non-finite loss at step {step} (lr {lr:e})")]
    NonFinite { step: usize, lr: f64 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error on {}: {source}", path.display())]
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

    /// Process exit status for this error: 1 validation, 2 runtime/numeric,
    /// 3 I/O or integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Validation(_)
            | Error::Usage(_)
            | Error::Lookup { .. }
            | Error::Conflict { .. }
            | Error::Parse(_)
            | Error::Length { .. } => 1,
            Error::NonFinite { .. } => 2,
            Error::Format(_) | Error::Integrity(_) | Error::Io { .. } => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
