use std::path::PathBuf;

use thiserror::Error;

/// Failures reading or validating a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"A3D2\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short stable identifier, used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Checkpoint(CheckpointError::BadMagic(_)) => "bad-magic",
            Error::Checkpoint(CheckpointError::Truncated(_)) => "truncated",
            Error::Checkpoint(CheckpointError::ConfigMismatch(_)) => "config-mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image { .. } => "image",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
