use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration for `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("non-finite loss at stage {stage}, iteration {iter}")]
    NonFiniteLoss { stage: usize, iter: usize },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
