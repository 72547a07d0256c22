use thiserror::Error;

/// Errors raised by the rendering, loss and optimization routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate covariance: eigenvalue {0:e} below floor")]
    DegenerateCovariance(f64),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::ContractViolation(msg.into())
}
