//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shapes disagree.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// The score model has no target registered for a caption.
    #[error("unknown caption: {0:?}")]
    UnknownCaption(String),

    /// A model checkpoint could not be loaded.
    #[error("model load failed: {0}")]
    ModelLoad(String),

    /// The optimizer produced a non-finite gradient and aborted.
    #[error("non-finite gradient at iteration {iteration}: {detail}")]
    NonFiniteGradient { iteration: usize, detail: String },

    /// An unknown enum-like selector was supplied.
    #[error("unknown kind: {0:?}")]
    UnknownKind(String),

    /// Dataset manifest problems (missing files, bad records).
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("image decode/encode error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
