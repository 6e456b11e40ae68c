use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A kernel received operands whose extents do not conform.
    #[error("{kernel}: dimension mismatch ({detail})")]
    Dimension { kernel: &'static str, detail: String },

    /// A call violated an API precondition (untracked loss, missing grad, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("image/motion misaligned: image has {image} steps, motion has {motion}")]
    Alignment { image: usize, motion: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(kernel: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            kernel,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
