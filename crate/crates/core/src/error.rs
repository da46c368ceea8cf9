use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("dimension overflow: {rows} x {cols}")]
    DimOverflow { rows: u64, cols: u64 },

    #[error("{0}")]
    Malformed(String),

    #[error("protocol line {line}: unknown key {token:?}")]
    UnknownKey { line: usize, token: String },

    #[error("protocol line {line}: {detail}")]
    Protocol { line: usize, detail: String },

    #[error("{0}")]
    Data(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a file path to errors raised while decoding an in-memory buffer.
    pub(crate) fn at_path(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::DimOverflow { .. }
            | Error::Malformed(_)
            | Error::NonFinite(_) => Error::Format {
                path: path.into(),
                detail: self.to_string(),
            },
            other => other,
        }
    }
}
