use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands disagree on shape.
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A kernel produced or was handed NaN or an infinity.
    NonFinite { op: &'static str },
    InvalidArgument {
        op: &'static str,
        reason: &'static str,
    },
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    /// A brute-force oracle was asked to enumerate too many neurons.
    BoundExceeded { neurons: usize, max: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                op,
                expected,
                found,
            } => write!(f, "{op}: shape mismatch, expected {expected:?}, found {found:?}"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Error::InvalidArgument { op, reason } => write!(f, "{op}: {reason}"),
            Error::IndexOutOfRange { op, index, len } => {
                write!(f, "{op}: index {index} out of range for length {len}")
            }
            Error::BoundExceeded { neurons, max } => write!(
                f,
                "model has {neurons} binary neurons, enumeration is limited to {max}"
            ),
        }
    }
}

impl core::error::Error for Error {}
