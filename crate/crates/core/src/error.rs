use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {msg}")]
    Header { path: PathBuf, msg: String },

    #[error("payload size mismatch: header declares {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },

    #[error("non-finite value at voxel index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible phantom: {0}")]
    Infeasible(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimMismatch(msg.into())
    }
}
