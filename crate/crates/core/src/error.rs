use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can surface.
#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab too small: {requested} < {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("{file}:{line}: {msg}")]
    Format { file: String, line: usize, msg: String },
    #[error("record {record}: {msg}")]
    Record { record: usize, msg: String },
    #[error("insufficient tokens: have {have}, need {need}")]
    InsufficientTokens { have: usize, need: usize },
    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },
    #[error("empty text")]
    EmptyText,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("divergence at step {step}, tensor {tensor}")]
    Divergence { step: u64, tensor: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("context overflow: capacity {capacity}")]
    ContextOverflow { capacity: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = ForgeError> = std::result::Result<T, E>;

impl ForgeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        ForgeError::Io { path: path.into(), source }
    }

    pub(crate) fn format(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        ForgeError::Format { file: file.into(), line, msg: msg.into() }
    }
}
