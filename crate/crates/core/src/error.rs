use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token id {id} out of vocabulary (size {size})")]
    OutOfVocabulary { id: usize, size: usize },

    #[error("rank mismatch: expected rank {expected}, found {actual}")]
    Rank { expected: usize, actual: usize },

    #[error("corrupt tensor container {path}: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("mass mismatch: sums are {p_sum} and {q_sum}")]
    MassMismatch { p_sum: f64, q_sum: f64 },

    #[error("missing ids: {0:?}")]
    MissingIds(Vec<String>),

    #[error("{path}:{line}: field `{field}`: {message}")]
    Record {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
