//! Crate-wide error type with process exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, parameter out of its domain, or a shape
    /// mismatch between declared and actual dimensions.
    #[error("config error: {0}")]
    Config(String),

    /// Unusable input data (missing files, empty datasets, malformed
    /// checkpoints or metric files).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical-stability failure (non-finite values, covariance not PSD
    /// beyond tolerance, degenerate inputs to a metric).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code contract: 0 success, 2 config error, 3 data error,
    /// 4 numerical-stability error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Data(msg.into()))
}

pub(crate) fn numerical_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Numerical(msg.into()))
}
