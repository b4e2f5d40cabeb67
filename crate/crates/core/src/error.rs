use thiserror::Error;

/// Errors raised by the deconvolution toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("degenerate channel {channel}: {reason}")]
    DegenerateChannel { channel: usize, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }

    /// Process exit status used by the command-line driver.
    ///
    /// 3 for data problems, 4 for numerical failures. Usage errors (2) are
    /// reported by the argument parser before any of these can occur.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalFailure(_) => 4,
            _ => 3,
        }
    }
}
