use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error)]
pub enum PkefError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error in {path}:{line}: {detail}")]
    Format {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported head variant for {what}: {variant}")]
    UnsupportedVariant { what: &'static str, variant: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PkefError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        PkefError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PkefError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PkefError>;
