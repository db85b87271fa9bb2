use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants map onto the CLI exit codes: configuration problems exit
/// with 2, everything caused by malformed or out-of-range data exits with 3.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContamError {
    /// An argument is outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),
    /// Inconsistent or missing configuration (hyperparameters, splits, modes).
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed input data (CSV, JSON, score files).
    #[error("data error: {0}")]
    Data(String),
    /// The data-sharing protocol could not complete.
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl ContamError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        ContamError::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        ContamError::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        ContamError::Data(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            ContamError::Config(_) => 2,
            ContamError::Domain(_) | ContamError::Data(_) | ContamError::Protocol(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, ContamError>;
