use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A recorded operation produced NaN or infinity.
    #[error("non-finite value produced by op #{op_index} ({op})")]
    NonFinite { op_index: usize, op: &'static str },

    #[error("parameter layout mismatch: expected {expected} values, found {found}")]
    LayoutMismatch { expected: usize, found: usize },

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch carries no domain ids")]
    MissingDomainIds,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset parse error: {0}")]
    Parse(String),

    #[error("fold held_out={fold} seed={seed} failed: {source}")]
    Fold {
        fold: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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
}
