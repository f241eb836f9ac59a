use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; record a new forward pass first")]
    TapeReused,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error in {record}: {message}")]
    Data { record: String, message: String },

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: &'static str },

    #[error("model parameter `{0}` is not finite; refusing to decode")]
    NonFiniteParameter(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
