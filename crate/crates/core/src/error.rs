use std::path::PathBuf;

use camseg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CamsegError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: String,
        got: String,
    },

    /// A label outside the palette was found while colorizing.
    #[error("label {label} at ({row}, {col}) is outside the palette of {classes} classes")]
    Codec {
        label: u8,
        row: usize,
        col: usize,
        classes: usize,
    },

    #[error("invalid palette: {0}")]
    Palette(String),

    #[error("{source_name}:{line}: {msg}")]
    Format {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid parameter for {what}: {msg}")]
    Parameter { what: &'static str, msg: String },

    #[error("training diverged at step {step}: {msg}")]
    Training { step: u64, msg: String },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint {path}: {msg} (at byte offset {offset})")]
    Checkpoint {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error("checkpoint {path}: unsupported format version {found} (this build reads version {supported})")]
    CheckpointVersion {
        path: String,
        found: u32,
        supported: u32,
    },

    #[error("refusing to overwrite {0}; pass --force to replace it")]
    Exists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CamsegError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CamsegError {
    let path = path.into();
    move |source| CamsegError::Io { path, source }
}
