use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CraftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CraftError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}: {message}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{0}: file contains no rows")]
    EmptyFile(PathBuf),

    #[error("invalid vector file {path}: {message}")]
    VectorFormat { path: PathBuf, message: String },

    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pool too small: {available} eligible candidates for a budget of {requested}")]
    PoolTooSmall { available: usize, requested: usize },

    #[error("combinatorial cap exceeded: {0}")]
    CombinatorialCap(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CraftError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CraftError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CraftError::InvalidArgument(msg.into())
    }
}
