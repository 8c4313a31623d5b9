//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid token id {id} for vocabulary of size {vocab_size}")]
    InvalidToken { id: usize, vocab_size: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty sentence")]
    EmptySentence,

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("undefined similarity: zero vector")]
    ZeroVector,

    #[error("undefined correlation: constant input series")]
    ConstantSeries,

    #[error("unknown parameter tensor: {0}")]
    UnknownParam(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
