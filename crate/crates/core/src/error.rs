use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes or lengths do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Value outside the domain of an operation (log of nonpositive, zero class count, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Caller broke an API contract (non-scalar loss, foreign variable, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// Input record or configuration failed validation.
    #[error("validation error: {0}")]
    Validation(String),
    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Repeated evaluation of a function gave different results.
    #[error("flaky gradient check: {0}")]
    FlakyCheck(String),
}
