use alloc::string::String;
use core::fmt;

/// Errors surfaced by tensor ops, model assembly, and the training loop.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Incompatible operand shapes; carries both shapes rendered as text.
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    /// A dimension that must be positive (or divisible) is not.
    InvalidDimension { op: &'static str, detail: String },
    /// A forward op produced (or was handed) a NaN/Inf value.
    NonFinite { op: &'static str },
    /// Inconsistent or out-of-range configuration.
    Config(String),
    /// Class attention invoked with an empty key set.
    EmptyKeySet,
    /// Optimizer step aborted because a gradient was not finite.
    NonFiniteGradient { param: String },
    /// Dataset has no samples.
    EmptyDataset,
    /// Unknown model preset name.
    UnknownPreset(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs} and {rhs}")
            }
            CoreError::InvalidDimension { op, detail } => {
                write!(f, "{op}: invalid dimension: {detail}")
            }
            CoreError::NonFinite { op } => {
                write!(f, "{op}: non-finite value encountered")
            }
            CoreError::Config(detail) => write!(f, "config error: {detail}"),
            CoreError::EmptyKeySet => write!(f, "class attention: empty key set"),
            CoreError::NonFiniteGradient { param } => {
                write!(f, "optimizer: non-finite gradient for parameter `{param}`")
            }
            CoreError::EmptyDataset => write!(f, "dataset contains no samples"),
            CoreError::UnknownPreset(name) => write!(f, "unknown model preset `{name}`"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
