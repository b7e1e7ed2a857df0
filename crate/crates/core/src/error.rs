use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("batch-size error: {0}")]
    BatchSize(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::BatchSize(_) | Error::Json(_) => 2,
            Error::Protocol(_) => 3,
            Error::Numeric(_) => 4,
            Error::Contract(_) | Error::Format(_) | Error::Io(_) | Error::Csv(_) => 1,
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
