use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("record `{id}` is invalid: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("text has no content tokens")]
    EmptyTokenization,

    #[error("token id {id} is outside the vocabulary (size {vocab_size})")]
    OutOfVocabulary { id: u32, vocab_size: usize },

    #[error("vocabulary has no [PAD] token")]
    MissingPadToken,

    #[error("no poolable positions (every position is special or masked)")]
    NothingToPool,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("backend does not support {0}")]
    Unsupported(&'static str),

    #[error("non-finite gradient at interpolation step {step}")]
    NonFiniteGradient { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt {what}: {message}")]
    Corrupt { what: &'static str, message: String },

    #[error(
        "model fingerprint mismatch: index built with `{indexed}`, active backend is `{active}`"
    )]
    FingerprintMismatch { indexed: String, active: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("document `{doc_id}`: {source}")]
    Document {
        doc_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("external backend: {0}")]
    External(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn for_document(doc_id: &str, source: Error) -> Self {
        Error::Document {
            doc_id: doc_id.to_string(),
            source: Box::new(source),
        }
    }
}
