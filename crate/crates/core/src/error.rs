use thiserror::Error;

/// Errors raised by the library. Variants map onto the CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Inputs are individually valid but inconsistent with each other.
    #[error("inconsistent input: {0}")]
    Consistency(String),
    /// A point or set lies outside the region it was used with.
    #[error("domain error: {0}")]
    Domain(String),
    /// The instance is too large for an exact method.
    #[error("capability exceeded: {0}")]
    Capability(String),
    /// Not enough signal to produce an estimate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// An internal invariant failed. Always a bug.
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)*) => {
        // Written without negation so that NaN fails the check.
        if $cond {
        } else {
            return Err($crate::error::Error::$variant(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure;
