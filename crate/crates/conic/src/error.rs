use thiserror::Error;

/// Errors raised for malformed problems. Solver outcomes such as
/// infeasibility are reported through [`crate::Status`] instead.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("variable index {index} out of range for a problem with {n} variables")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("cone ({u}, {v}, {z}) must reference three distinct variables")]
    DegenerateCone { u: usize, v: usize, z: usize },

    #[error("log term on variable {index} has non-positive weight {weight}")]
    BadLogWeight { index: usize, weight: f64 },

    #[error("bounds on variable {index} are inconsistent: [{lower}, {upper}]")]
    BadBounds { index: usize, lower: f64, upper: f64 },

    #[error("non-finite coefficient in {0}")]
    NonFinite(&'static str),

    #[error("invalid solver configuration: {0}")]
    BadConfig(String),

    #[error("invalid start point: {0}")]
    BadStart(String),

    #[error("malformed problem dump at line {line}: {message}")]
    Dump { line: usize, message: String },
}
