//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed inconsistent dimensions, out-of-range values or
    /// malformed data.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Operation not defined for the requested family or mode.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Numerical breakdown (non-finite objective, parameter blow-up).
    /// `iteration` locates the outer EM iteration (0 when not inside EM).
    #[error("numerical failure at iteration {iteration}: {message}")]
    Numerical { iteration: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }

    pub fn numerical(iteration: usize, msg: impl Into<String>) -> Self {
        Error::Numerical { iteration, message: msg.into() }
    }
}
