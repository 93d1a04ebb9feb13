use thiserror::Error;

use crate::conic::SolveStatus;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("variable count mismatch: {left} vs {right}")]
    VariableMismatch { left: usize, right: usize },

    #[error("point has {got} coordinates, polynomial has {expected} variables")]
    PointLength { expected: usize, got: usize },

    #[error("cannot eliminate a variable from a polynomial in {0} variable(s)")]
    TooFewVariables(usize),

    #[error("degree {degree} exceeds the available degree {limit}")]
    DegreeOverflow { degree: usize, limit: usize },

    #[error("relaxation order {order} is below the required {required}")]
    OrderTooSmall { order: usize, required: usize },

    #[error("invalid risk preference: {0}")]
    InvalidPreference(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid samples: {0}")]
    InvalidSamples(String),

    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("solution status is {0:?}, an optimal solution is required")]
    NotOptimal(SolveStatus),

    #[error("relaxation did not solve after {attempts} attempt(s); last status {status:?} at eps = {epsilon}")]
    DoublingExhausted {
        attempts: usize,
        status: SolveStatus,
        epsilon: f64,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty reference set")]
    EmptyReference,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
