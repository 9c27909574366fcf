use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty or yields no usable tokens")]
    EmptyCorpus,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("encoding is not normalized (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("batch of {0} pairs is too small, need at least 2")]
    BatchTooSmall(usize),

    #[error("unsupported file format or version: {0}")]
    FormatVersionMismatch(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no candidate matches the filter")]
    EmptyPool,

    #[error("approximate search structure has not been built")]
    NotBuilt,

    #[error("unknown city: {0}")]
    UnknownCity(String),

    #[error("score list is empty")]
    EmptyScores,

    #[error("entity score map is empty")]
    EmptyQ,

    #[error("insufficient training data: {0}")]
    InsufficientData(String),

    #[error("booking requires exactly one selected entity, {0} remain")]
    NoSelectedEntity(usize),

    #[error("translation provider failed{}: {message}", candidate.as_ref().map(|c| format!(" on candidate {c}")).unwrap_or_default())]
    Provider {
        candidate: Option<String>,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
