use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("no convergence: {0}")]
    Divergence(String),
    #[error("missing history: {0}")]
    Dependency(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("degenerate covariance: {0}")]
    Degenerate(String),
    #[error("{0}")]
    State(String),
    #[error("oracle size: {0}")]
    Size(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Parse(_) | Error::Contract(_) | Error::Io(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
