use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: malformed files, out-of-range ids, invalid config.
    #[error("input error: {0}")]
    Input(String),

    /// A peer sent something that does not match what this worker expects.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An internal precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("aborted: {0}")]
    Aborted(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for input errors, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) => 2,
            _ => 3,
        }
    }
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}
macro_rules! protocol_err {
    ($($arg:tt)*) => { $crate::error::Error::Protocol(format!($($arg)*)) };
}
pub(crate) use input_err;
pub(crate) use protocol_err;
