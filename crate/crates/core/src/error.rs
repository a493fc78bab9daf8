use thiserror::Error;

/// Errors raised by the boxlift library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("stiffness matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("rotation matrix is not orthonormal with det = +1")]
    NotARotation,

    #[error("contact normal is not unit length (norm = {0})")]
    NonUnitNormal(f64),

    #[error("contact is in tension (f_n = {0} > 0)")]
    Tension(f64),

    #[error("empty measurement batch")]
    EmptyBatch,

    #[error("time base mismatch: {0} vs {1} samples")]
    TimeBaseMismatch(usize, usize),

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("quasi-static settle did not converge after {iterations} iterations (force residual {force_residual:.3e} N, moment residual {moment_residual:.3e} N m)")]
    SettleFailed {
        iterations: usize,
        force_residual: f64,
        moment_residual: f64,
    },

    #[error("optimizer did not converge: {0}")]
    NotConverged(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Failures of an iterative method, as opposed to bad input.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(self, Error::NotConverged(_) | Error::SettleFailed { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
