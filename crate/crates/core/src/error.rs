use std::io;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation or configuration needs.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of range or inconsistent with another.
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary or text file could not be decoded.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// An API was used out of order (e.g. backward twice on one tape).
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
