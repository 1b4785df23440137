//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the heatdiff library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Array shapes did not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A numerical failure (non-finite loss, divergent update).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A malformed checkpoint or on-disk artifact. `offset` is the byte
    /// position at which decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A dataset file did not match the expected schema.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
