use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no decodable images found in {0}")]
    EmptyDataset(PathBuf),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} (offending batch index {batch_index:?}): {detail}")]
    TrainingDiverged {
        step: u64,
        batch_index: Option<usize>,
        detail: String,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
