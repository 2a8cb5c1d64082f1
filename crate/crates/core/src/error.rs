use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("non-finite value produced by {site}")]
    NonFinite { site: String },

    #[error("{path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("out-of-vocabulary token `{0}` and the vocabulary has no <unk> entry")]
    NoUnknownToken(String),

    #[error("corpus too short: {0}")]
    CorpusTooShort(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("optimizer step called before any gradient was accumulated")]
    NoGradients,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::Config { .. } => "config",
            Error::TokenOutOfRange { .. } => "token",
            Error::NonFinite { .. } => "divergence",
            Error::Data { .. } | Error::NoUnknownToken(_) | Error::CorpusTooShort(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::NoGradients => "optimizer",
            Error::Io { .. } => "io",
        }
    }
}
