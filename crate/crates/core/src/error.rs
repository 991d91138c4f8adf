//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// The variants map onto the CLI exit codes: config errors exit with 2,
/// training divergence with 3, everything else with 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed a value outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// Configuration is internally inconsistent or mismatched with data.
    #[error("config error: {0}")]
    Config(String),

    /// API misuse, e.g. stepping a finished episode.
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite value or otherwise diverged.
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }
}
