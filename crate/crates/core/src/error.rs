use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not agree.
    Shape(String),
    /// Argument outside the function's domain.
    Domain(String),
    /// A value that must be finite was NaN or infinite.
    NonFinite(String),
    /// Sequence longer than the model's maximum length.
    Overlength { len: usize, max: usize },
    /// Invalid configuration field.
    Config { field: String, reason: String },
    /// Training produced a non-finite loss.
    Divergence { epoch: usize, step: usize, component: String },
    /// Unknown token or parameter name.
    Lookup(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Overlength { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            Error::Config { field, reason } => write!(f, "invalid config field `{field}`: {reason}"),
            Error::Divergence { epoch, step, component } => write!(
                f,
                "training diverged at epoch {epoch} step {step}: `{component}` is not finite"
            ),
            Error::Lookup(m) => write!(f, "lookup failed: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
