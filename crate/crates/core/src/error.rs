//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("non-finite value produced in {0}")]
    NonFiniteValue(&'static str),

    #[error("dataset generation failed after {attempts} attempts (margin/box too restrictive)")]
    GenerationFailed { attempts: usize },

    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("empty sample view")]
    EmptyView,

    #[error("sample index {index} out of range (capacity {capacity})")]
    IndexOutOfRange { index: usize, capacity: usize },

    #[error("missing endpoint-Jacobian block for sample {index}")]
    MissingBlock { index: usize },

    #[error("endpoint Jacobian is stale: computed at control version {jacobian}, control is at {control}")]
    StaleJacobian { jacobian: u64, control: u64 },

    #[error("sample {index} did not converge within {iterations} iterations (cost {cost:e})")]
    NonConvergence {
        index: usize,
        iterations: usize,
        cost: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
