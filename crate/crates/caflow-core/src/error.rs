//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape error in {context}: {message}")]
    Shape { context: &'static str, message: String },

    /// A scalar argument violated an operation's contract.
    #[error("invalid argument in {context}: {message}")]
    InvalidArgument { context: &'static str, message: String },

    /// A gradient was requested for a non-scalar loss.
    #[error("grad requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// Otsu thresholding received a constant image.
    #[error("degenerate histogram: fewer than two occupied gray levels")]
    DegenerateHistogram,

    /// The training dataset is unusable.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint container is malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl CoreError {
    pub fn shape(context: &'static str, message: impl Into<String>) -> Self {
        CoreError::Shape { context, message: message.into() }
    }

    pub fn invalid(context: &'static str, message: impl Into<String>) -> Self {
        CoreError::InvalidArgument { context, message: message.into() }
    }
}
