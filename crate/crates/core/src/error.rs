use alloc::string::String;

/// Errors produced by the hierarchy core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("tensor length {actual} does not match expected {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("operands live on different grids")]
    GridMismatch,
    #[error("operands are stored in different bases")]
    BasisMismatch,
    #[error("level {level} is out of range: {reason}")]
    LevelOutOfRange { level: usize, reason: String },
    #[error("dense marginal with {elements} entries exceeds the 2^28 guard; use an explicit override")]
    TooLarge { elements: u128 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("time grid: {0}")]
    TimeGrid(String),
    #[error("interaction order p={0} is unsupported (expected 2 or 4)")]
    UnsupportedOrder(u32),
    #[error("{0}")]
    Degenerate(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
