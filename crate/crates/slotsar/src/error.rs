//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch inside a compute-graph node or metric.
    #[error("shape error in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// A primitive produced NaN/Inf.
    #[error("non-finite output of node {op} (id {node})")]
    NonFinite { op: String, node: usize },

    /// Invalid parameter value (sigma <= 0, gamma <= 0, ...).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Invalid configuration (token count not square, out-of-range SCR, ...).
    #[error("invalid config: {0}")]
    Config(String),

    /// Missing or inconsistent data (datasets, checkpoints, feature files).
    #[error("data error: {0}")]
    Data(String),

    /// A file failed structural validation.
    #[error("corrupt file {path:?} at offset {offset}: {detail}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// Training hit a non-finite loss or gradient.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}
