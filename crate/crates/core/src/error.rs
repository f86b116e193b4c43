use thiserror::Error;

/// Errors raised by tensor operations, network assembly, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("odd spatial dimension: {0}")]
    OddSpatialDim(String),
    #[error("spatial dimension not divisible: {0}")]
    IndivisibleSpatialDim(String),
    #[error("index out of bounds: {0}")]
    OutOfBounds(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::ShapeMismatch(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::InvalidConfig(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use shape_err;
