use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    OutOfVocabulary { id: usize, vocab_size: usize },

    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence needs at least {min} tokens, got {len}")]
    SequenceTooShort { len: usize, min: usize },

    #[error("malformed tensor container header: {0}")]
    Header(String),

    #[error("checksum mismatch: header says {expected:08x}, payload hashes to {actual:08x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("invalid span: {0}")]
    Span(String),

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),

    #[error("label {0:?} is not covered by the verbalizer")]
    UnknownLabel(String),

    #[error("unknown {kind} {name:?}; available: {available}")]
    UnknownName {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Config validation failures map to exit code 2 in the CLI.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownName { .. } | Error::SchemaVersion { .. }
        )
    }
}
