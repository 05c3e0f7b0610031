use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TallError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TallError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TallError {
    pub fn config(msg: impl Into<String>) -> Self {
        TallError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TallError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TallError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short machine-readable category, used by the CLI for its error line.
    pub fn kind(&self) -> &'static str {
        match self {
            TallError::Shape { .. } => "shape",
            TallError::Config(_) => "config",
            TallError::Usage(_) => "usage",
            TallError::Format { .. } => "format",
            TallError::NonFinite(_) => "non-finite",
            TallError::Io { .. } => "io",
            TallError::Json(_) => "json",
        }
    }
}
