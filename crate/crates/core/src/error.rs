use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A hyperparameter or structural setting is out of range.
    #[error("configuration error: {0}")]
    Configuration(String),
    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// The metric has no defined value for this input (e.g. empty ground truth).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    /// A loss or activation became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! cfg_err {
    ($($arg:tt)*) => { $crate::error::Error::Configuration(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
pub(crate) use {cfg_err, contract_err, dim_err};
