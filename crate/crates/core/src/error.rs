use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value violates its contract (even kernel, odd width, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data is invalid (label out of range, duplicate ids, ...).
    #[error("input error: {0}")]
    Input(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// Backpropagation left a NaN or infinity in a parameter gradient.
    #[error("non-finite gradient for parameter `{param}` at flat index {index}")]
    NonFiniteGrad { param: String, index: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
