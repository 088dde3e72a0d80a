use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container: {0}")]
    MalformedHeader(String),

    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("tensor {name}: non-finite value at byte offset {offset}")]
    NonFinite { name: String, offset: u64 },

    #[error("tensor {name}: truncated payload at byte offset {offset} (need {needed} bytes, have {available})")]
    Truncated { name: String, offset: u64, needed: u64, available: u64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("d_ff {d_ff} is not divisible by {n_experts} experts")]
    NotDivisible { d_ff: usize, n_experts: usize },

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
