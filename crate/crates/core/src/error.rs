use thiserror::Error;

/// Errors raised by measures, solvers, estimators and experiments.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported dimension {dim} (grid quadrature supports d <= {max})")]
    UnsupportedDimension { dim: usize, max: usize },

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
