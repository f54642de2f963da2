use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LagoError>;

/// Errors raised by the inference engine.
#[derive(Debug, Error)]
pub enum LagoError {
    #[error("invalid box ({x}, {y}, {w}, {h}): width and height must be positive and finite")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },

    #[error("degenerate vector: {0}")]
    DegenerateVector(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid bundle: {0}")]
    InvalidBundle(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("score cache is empty")]
    EmptyCache,

    #[error("bundle decode error: {0}")]
    Format(#[from] DecodeError),

    #[error("failed to decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: DecodeError,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl LagoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        LagoError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Binary bundle decode failures. Each corresponds to one way a file can be
/// inconsistent with the `LAGO0001` layout.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("magic header mismatch (expected \"LAGO0001\")")]
    MagicMismatch,

    #[error("header declares d={header} but payload is sized for d={payload}")]
    DimMismatch { header: usize, payload: usize },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },

    #[error("invalid header: {0}")]
    InvalidHeader(String),
}
