use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {path}")]
    MissingFile { path: PathBuf },

    #[error("unsupported image format: {path} ({detail})")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("corrupt image: {path} ({detail})")]
    CorruptImage { path: PathBuf, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("loss became non-finite at step {step} (batch indices {batch:?})")]
    NanLoss { step: usize, batch: Vec<usize> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
