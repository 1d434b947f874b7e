use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("degenerate-embedding: norm {norm:e} is below {eps:e}")]
    DegenerateEmbedding { norm: f64, eps: f64 },
    #[error("numerical-instability: {0}")]
    NumericalInstability(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("set-too-large: requested {requested} permutations but only {available} exist")]
    SetTooLarge { requested: u128, available: u128 },
    #[error("not-enough-negatives: requested {requested} from a dataset of {dataset}")]
    NotEnoughNegatives { requested: usize, dataset: usize },
    #[error("truncated-record: {} at byte offset {offset}", path.display())]
    TruncatedRecord { path: PathBuf, offset: u64 },
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
