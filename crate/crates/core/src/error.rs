use alloc::string::String;
use core::fmt;

/// Errors raised by the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not fit the operation.
    Dimension(String),
    /// Invalid configuration (registries, hyperparameters, group counts, ...).
    Config(String),
    /// API misuse such as a non-scalar loss passed to `backward`.
    Usage(String),
    /// Invalid input data, e.g. an out-of-range label.
    Input(String),
    /// A genotype that breaks a structural invariant.
    Validation(String),
    /// Batch normalization over a single value per channel.
    DegenerateBatch,
    /// A loss or activation became NaN or infinite.
    Numerical { context: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Validation(m) => write!(f, "invalid genotype: {m}"),
            Error::DegenerateBatch => {
                write!(f, "degenerate batch: batch normalization needs more than one value per channel")
            }
            Error::Numerical { context } => write!(f, "numerical failure: {context}"),
        }
    }
}

#[cfg(feature = "std")]
extern crate std;

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
