use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{what} failed to converge (residual {residual:.3e})")]
    Convergence { what: String, residual: f64 },
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("step polynomial degree {degree} exceeds truncation order {order}")]
    DegreeExceedsTruncation { degree: usize, order: usize },
    #[error("sigma vanishes at t = {t:e} (below the time floor)")]
    SingularSigma { t: f64 },
    #[error("missing history: step {step} needs {needed} previous states, {available} available")]
    MissingHistory { step: usize, needed: usize, available: usize },
    #[error("singular Vandermonde system (duplicate interpolation fractions)")]
    SingularVandermonde,
    #[error("structure violation: {0}")]
    Structure(String),
    #[error("no convergence after {iterations} iterations (best residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("Krylov breakdown at iteration {0}")]
    Breakdown(usize),
    #[error("stability shift failed: minimum eigenvalue {min_eig:e} after shift")]
    StabilityShift { min_eig: f64 },
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("eigen-decomposition failed: {0}")]
    Eigen(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for errors that mean an iteration did not reach its tolerance.
    pub fn is_non_convergence(&self) -> bool {
        matches!(self, Error::NonConvergence { .. } | Error::Convergence { .. })
    }
}
