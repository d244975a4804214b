use thiserror::Error;

/// Crate-wide error type.
///
/// The variants map onto the process exit codes used by the CLI:
/// configuration problems exit 1, numerical divergence exits 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad shapes, bad hyperparameters, malformed
    /// config files, nonexistent environments.
    #[error("configuration error: {0}")]
    Config(String),

    /// A forward/backward pass or an update produced non-finite values.
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    /// An action distribution had no valid entry to sample from.
    #[error("invalid action set: {0}")]
    InvalidActionSet(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn divergence(msg: impl Into<String>) -> Self {
        Error::NumericalDivergence(msg.into())
    }

    /// Exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalDivergence(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
