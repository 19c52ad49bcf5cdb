use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidModel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("window [{start}, {end}] is outside sequence `{sequence}` with {frames} frames")]
    WindowOutOfRange {
        sequence: String,
        start: i64,
        end: i64,
        frames: usize,
    },

    #[error("flow unavailable for sequence `{sequence}`, center {center}, offset {offset}: {reason}")]
    Flow {
        sequence: String,
        center: usize,
        offset: i64,
        reason: String,
    },

    #[error("malformed flow file {path}: {reason}")]
    FlowFormat { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: loss = {loss}")]
    NonFiniteLoss {
        epoch: usize,
        iteration: usize,
        loss: f64,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
