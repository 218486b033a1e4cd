use thiserror::Error;

/// Errors raised by tensor kernels and the gradient tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("missing gradient: {0}")]
    MissingGrad(String),
    #[error("multiply counter overflow (exceeded 2^62)")]
    CounterOverflow,
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

/// Top-level error type of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("pyramid error: {0}")]
    Pyramid(String),
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("training diverged at {reason}")]
    Diverged {
        reason: String,
        history: Vec<crate::train::EpochRecord>,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
