use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("attention row {row} has every key masked")]
    DegenerateAttention { row: usize },

    #[error("cannot embed an n-gram that is entirely padding")]
    EmptyNGram,

    #[error("embedding provider failed on pair {pair_id}: {msg}")]
    Provider { pair_id: u32, msg: String },

    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error("missing neighbor set for pair {0}")]
    MissingNeighbors(u32),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
