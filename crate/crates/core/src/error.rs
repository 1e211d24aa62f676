use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Record { line: u64, message: String },

    #[error("duplicate bug_id `{0}` in corpus")]
    DuplicateBugId(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("split `{split}`: {message}")]
    Split { split: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("{0} is undefined for an empty relevant set")]
    EmptyRelevant(&'static str),

    #[error("confusion matrix is empty")]
    EmptyConfusion,

    #[error("training diverged: non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("service error: {0}")]
    Service(#[from] ServiceError),

    #[error("malformed artifact: {0}")]
    Artifact(String),

    #[error("scenario: {0}")]
    Scenario(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Failures of the external embedding / classification services.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("request to {endpoint} timed out")]
    Timeout { endpoint: String },

    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },

    #[error("{endpoint} answered with HTTP {status}")]
    Status { endpoint: String, status: u16 },

    #[error("malformed response from {endpoint}: {message}")]
    Malformed { endpoint: String, message: String },

    #[error("{what} count mismatch: expected {expected}, got {actual}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("embedding dimension changed from {expected} to {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("probability {value} at position {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
