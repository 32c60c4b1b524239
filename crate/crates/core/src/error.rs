use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model not found: {0}")]
    ModelNotFound(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("invalid layer selection: {0}")]
    InvalidLayers(String),

    #[error("target start {start} out of range for sequence of length {len}")]
    TargetOutOfRange { start: usize, len: usize },

    #[error("sequence of {len} tokens exceeds the context window of {window}")]
    ContextOverflow { len: usize, window: usize },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("target span mismatch for example {example_id}: {reason}")]
    SpanMismatch { example_id: String, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("single class: {0}")]
    SingleClass(String),

    #[error("unknown layer {0}")]
    UnknownLayer(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("equivalence judge: {0}")]
    Judge(String),

    #[error("config: {0}")]
    Config(String),

    #[error("figure: {0}")]
    Figure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
