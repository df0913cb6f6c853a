use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("failed to read {path}: {source}")]
    ReadFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to write {path}: {source}")]
    WriteFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("annotation {id}: RLE segmentation is unsupported; only polygon lists are accepted")]
    RleUnsupported { id: u64 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint holds {checkpoint} classes but the requested configuration has {requested}")]
    ClassCountMismatch { checkpoint: usize, requested: usize },

    #[error("non-finite loss at step {step}: {term} = {value}")]
    NonFiniteLoss {
        step: usize,
        term: String,
        value: f64,
    },

    #[error("evaluation: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, Error>;
