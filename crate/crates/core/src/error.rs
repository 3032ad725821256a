use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value at index {index} in {what}")]
    NonFinite { what: &'static str, index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("class id {id} at pixel {pixel} is out of range for {num_classes} classes")]
    ClassOutOfRange { id: u8, pixel: usize, num_classes: usize },

    #[error("partial mask has no labeled pixels")]
    NoLabeledPixels,

    #[error("mask has no foreground pixels")]
    NoForeground,

    #[error("empty batch")]
    EmptyBatch,

    #[error("not enough samples: need {required}, have {available}")]
    InsufficientSamples { required: usize, available: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model kind `{kind}` cannot train on this dataset: {reason}")]
    IncompatibleDataset { kind: String, reason: String },

    #[error("model has no bottom branch")]
    MissingBranch,

    #[error("run records do not share a configuration: {0}")]
    MixedConfigs(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset errors in {root}:\n  {}", .problems.join("\n  "))]
    Dataset { root: PathBuf, problems: Vec<String> },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
