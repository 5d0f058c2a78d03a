use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("window {window} lies outside image of size {width}x{height}")]
    WindowOutOfBounds {
        window: String,
        width: usize,
        height: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no valid records under {root} ({errors} record errors)")]
    NoValidRecords { root: PathBuf, errors: usize },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid class split: {0}")]
    Split(String),

    #[error("infeasible shot budget for class {class} ({name}): {reason}")]
    Infeasible {
        class: ClassId,
        name: String,
        reason: String,
    },

    #[error("empty support pool for class {0}")]
    EmptySupportPool(ClassId),

    #[error("missing support vector for class {0}")]
    MissingSupport(ClassId),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("io error at {path}: {source}")]
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

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
