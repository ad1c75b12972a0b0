use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    ValueOutOfRange { value: f64, index: usize },

    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image {height}x{width} is smaller than the 16x16 minimum")]
    ShapeTooSmall { height: usize, width: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("file has no mate in the other stream: {0}")]
    UnpairedFile(String),

    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("patch size {patch} exceeds image dimension {dimension}")]
    PatchTooLarge { patch: usize, dimension: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FusionError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FusionError::ShapeMismatch(msg.into())
    }
}
