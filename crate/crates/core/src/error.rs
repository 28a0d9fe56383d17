use std::io;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// The variants are grouped so that a front end can map them onto exit
/// codes: configuration and numeric problems, data and file problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("scaling is undefined: critical dimension is 0 (train_len {train_len} <= 2*pi)")]
    UndefinedScaling { train_len: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by input data or files rather than by numeric
    /// configuration.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
