//! Error type shared by every solver and the CLI layer.

use thiserror::Error;

/// Errors produced by grid construction, simulation, regression, solvers,
/// and configuration loading.
#[derive(Debug, Error)]
pub enum Error {
    /// The delay does not land on the step grid, or a grid parameter is
    /// out of range.
    #[error("invalid time grid: {0}")]
    Grid(String),

    /// A dimension disagreement between blocks that must line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    /// A non-finite value was produced or supplied where a finite one is
    /// required. Reported with enough position information to find it.
    #[error("non-finite value in {context} (path {path}, time index {time_index})")]
    NonFinite {
        context: String,
        path: usize,
        time_index: isize,
    },

    /// The regression design could not be assembled or factored.
    #[error("regression failure at time index {time_index}: {reason}")]
    Regression { time_index: isize, reason: String },

    /// A model or spec failed validation. Every violation found is listed,
    /// not just the first.
    #[error("invalid specification:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),

    /// An iterative solver exhausted its iteration budget. The residual
    /// history is attached so the caller can see whether it was diverging
    /// or merely slow.
    #[error("no convergence after {iterations} iterations (last residuals {residuals:?})")]
    NoConvergence {
        iterations: usize,
        residuals: Vec<f64>,
    },

    /// A structural precondition for a specialized solver does not hold.
    #[error("precondition not satisfied: {0}")]
    Precondition(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Convenience constructor for a single validation violation.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(vec![msg.into()])
    }
}

pub type Result<T> = std::result::Result<T, Error>;
