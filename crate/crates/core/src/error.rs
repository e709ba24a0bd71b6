use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not fit the kernel or operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid attribute, hyperparameter or configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an API contract (e.g. non-scalar backward root).
    #[error("contract error: {0}")]
    Contract(String),

    /// Operation attempted in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// NaN or infinity where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or unsupported file content.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
