use thiserror::Error;

use crate::tunnel::TunnelError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("simulation stalled: {0}")]
    Stall(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<TunnelError> for Error {
    fn from(e: TunnelError) -> Self {
        Error::Config(e.to_string())
    }
}

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Stall(_) => 1,
        }
    }
}
