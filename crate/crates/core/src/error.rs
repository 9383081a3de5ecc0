use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AtentError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AtentError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward already ran on this tape")]
    DoubleBackward,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("run stopped after epoch {epoch}; rerun with resume to continue")]
    Interrupted { epoch: usize },

    #[error("another run holds the lock {0}")]
    Locked(PathBuf),

    #[error("malformed {kind} file {path}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AtentError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AtentError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AtentError::Io {
            path: path.into(),
            source,
        }
    }
}
