use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A precondition of an operation was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// A binary file could not be decoded.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// The class-incremental protocol was violated (e.g. overlapping label sets).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A sample carries a label outside the range allowed for its task.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
