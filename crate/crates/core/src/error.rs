use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VncaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VncaError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {term} at element {index}")]
    NonFinite { term: String, index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty feature set in {0}")]
    EmptySet(&'static str),

    #[error("adapter `{adapter}` failed at {layer}: {reason}")]
    Adapter {
        adapter: String,
        layer: String,
        reason: String,
    },

    #[error("invalid VNV1 data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl VncaError {
    pub(crate) fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        VncaError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VncaError::Io {
            path: path.into(),
            source,
        }
    }
}
