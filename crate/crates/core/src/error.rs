use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch for sample `{id}`: {what} has length {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("non-finite value in sample `{id}` ({what})")]
    NonFinite { id: String, what: &'static str },

    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("scope {scope} is not available for this head: {reason}")]
    ScopeMismatch { scope: String, reason: String },

    #[error("normal equations for dimension {dim} are rank deficient; use ridge_alpha > 0")]
    RankDeficient { dim: usize },

    #[error("gradient descent diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. } | Error::Diverged { .. } | Error::Undefined(_)
        )
    }
}
