use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// NaN/Inf encountered, or a numerical routine failed.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An argument is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Malformed dataset or checkpoint file.
    #[error("format error at offset {offset}: {message}")]
    Format { offset: u64, message: String },
    /// Pair or episode sampling preconditions are not met.
    #[error("sampling error: {0}")]
    Sampling(String),
    /// Clustering metric is undefined for the input.
    #[error("metric error: {0}")]
    Metric(String),
    /// Operation called on an object in the wrong state.
    #[error("state error: {0}")]
    State(String),
    /// Training diverged.
    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
