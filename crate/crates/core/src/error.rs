use std::ops::Range;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed {file}{}: {message}", record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Format { file: String, record: Option<usize>, message: String },

    #[error("example {example} refers to unknown database `{db_id}`")]
    Reference { example: String, db_id: String },

    #[error("invalid schema `{db_id}`: {message}")]
    Schema { db_id: String, message: String },

    #[error("SQL grammar error at {span:?}: {message}")]
    Grammar { message: String, span: Range<usize> },

    #[error("example {example}: encoder input of {len} tokens exceeds limit {limit}")]
    Capacity { example: String, len: usize, limit: usize },

    #[error("non-finite value: {0}")]
    Numerical(String),

    #[error("decoding hit the {0}-step cap before completing a tree")]
    Truncated(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("not found: {0}")]
    Lookup(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn grammar(message: impl Into<String>, span: Range<usize>) -> Self {
        Error::Grammar { message: message.into(), span }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
