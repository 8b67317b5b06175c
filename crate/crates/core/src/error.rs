use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: malformed record: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid template: {0}")]
    Template(String),

    #[error("invalid attribute assignment: {0}")]
    Assignment(String),

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("sequence of length {len} exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },

    #[error("sequence too short: {0} tokens (need at least 2)")]
    SequenceTooShort(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: u64, message: String },

    #[error("gradient norm {norm} exceeds clip norm {clip} (sensitivity bound violated)")]
    Unclipped { norm: f64, clip: f64 },

    #[error("privacy target infeasible: {0}")]
    Infeasible(String),

    #[error("classifier error: {0}")]
    Classifier(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
