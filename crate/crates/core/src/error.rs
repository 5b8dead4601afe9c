use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SddError>;

/// Every failure the library can report.
///
/// `Config`, `Parse` and `UndefinedMetric` are validation failures (bad input
/// or settings); the remaining variants are runtime failures.
#[derive(Debug, Error)]
pub enum SddError {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("value error: {0}")]
    Value(String),

    #[error("failed to load tensor `{tensor}`: {reason}")]
    Load { tensor: String, reason: String },

    #[error("corrupt token bank: {0}")]
    CorruptBank(String),

    #[error("cannot build token bank: {0}")]
    Build(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl SddError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SddError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by invalid input or configuration rather than
    /// by the computation itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            SddError::Config(_)
                | SddError::Parse { .. }
                | SddError::UndefinedMetric(_)
                | SddError::CheckpointMismatch(_)
        )
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> SddError {
    SddError::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> SddError {
    SddError::Shape(msg.into())
}
