use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: corners must satisfy 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("generalized IoU is undefined when both boxes have zero area")]
    DegeneratePair,

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{}:{line}: field `{field}`: {message}", file.display())]
    Data {
        file: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("image id mismatch between predictions and ground truth: {0:?}")]
    ImageMismatch(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
