use thiserror::Error;

pub type Result<T, E = CmtrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CmtrError {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input lies outside the mathematical domain of the operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A documented precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tape error: {0}")]
    Tape(String),

    /// Finite-difference check observed a non-deterministic function.
    #[error("unreliable gradient check: {0}")]
    UnreliableCheck(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CmtrError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CmtrError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        CmtrError::Domain { op, detail: detail.into() }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        CmtrError::Contract(detail.into())
    }
}

/// Early-return a contract error unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::CmtrError::Contract(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
