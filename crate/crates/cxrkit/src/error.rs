//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Image has an unsupported channel count or an inconsistent pixel buffer.
    #[error("invalid image: {0}")]
    InvalidImage(String),

    /// An operation parameter is out of its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A model or pipeline configuration failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Dataset contents violate a precondition (empty split, missing class, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// An input tensor or image does not match the consumer's expected shape.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A dataset directory does not follow the `covid/` + `normal/` layout.
    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    /// Requested split ratios produce an empty subset.
    #[error("invalid split: {0}")]
    InvalidSplit(String),

    /// A model is not in a state that supports the requested operation.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// An augmented image derived from a test-split source reached a training set.
    #[error("data leak: {0}")]
    DataLeak(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A required external resource (pretrained weights, ...) is unavailable.
    #[error("resource unavailable: {0}")]
    Resource(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration validation
    /// failures, 3 for data leaks, 4 for training divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::DataLeak(_) => 3,
            Error::Divergence(_) => 4,
            _ => 1,
        }
    }
}
