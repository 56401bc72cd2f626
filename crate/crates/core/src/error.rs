use thiserror::Error;

/// Error type shared across the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value fails a documented precondition (bad probability vector,
    /// unknown enum name, out-of-range parameter).
    #[error("validation error: {0}")]
    Validation(String),

    /// The API was called in a way it does not support (non-scalar backward
    /// root, batch of one where two are required).
    #[error("usage error: {0}")]
    Usage(String),

    /// A run configuration is internally inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// An on-disk container is malformed. `offset` is the byte position at
    /// which the problem was detected.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Training produced a non-finite loss or gradient.
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
