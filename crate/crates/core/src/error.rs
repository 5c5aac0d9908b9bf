//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes, axes or extents passed to a tensor op.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An op produced NaN or Inf. Raised immediately instead of letting the
    /// value poison downstream computation.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// An API contract was violated (missing gradient, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model / training / generator configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Dataset or file-format problem.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
