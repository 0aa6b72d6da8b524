//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, corpus or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Corpus specification cannot be realised (e.g. empty lexicon for a slot).
    #[error("specification error: {0}")]
    Specification(String),

    /// Invalid runtime input (token ids, empty batches, OOV tokens).
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("class-support error: class `{0}` has no tokens")]
    ClassSupport(String),

    #[error("ranking error: {0}")]
    Ranking(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("completeness error: {0}")]
    Completeness(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint written by an incompatible version or not a checkpoint at all.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("corrupt dump: {0}")]
    Corruption(String),

    #[error("stale dump: {0}")]
    Staleness(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Specification(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
