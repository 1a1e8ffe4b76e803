use ndcore::NdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] NdError),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse error category used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Format,
    Numeric,
    Training,
    Io,
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) | Error::Contract(_) => Category::Config,
            Error::Format { .. } => Category::Format,
            Error::Tensor(NdError::Dimension { .. }) | Error::Tensor(NdError::Contract(_)) => Category::Config,
            Error::Tensor(_) | Error::Numeric(_) => Category::Numeric,
            Error::Training { .. } => Category::Training,
            Error::Io(_) => Category::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
