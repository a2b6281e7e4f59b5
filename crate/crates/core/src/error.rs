use thiserror::Error;

/// Errors raised by the design toolkit.
#[derive(Debug, Error)]
pub enum OedError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("operator `{0}` does not provide a transpose action")]
    MissingTranspose(String),

    #[error("zero or non-finite pivot at row {row} during factorization")]
    Factorization { row: usize },

    #[error("time step {step} produced a non-finite state")]
    TimeStepBreakdown { step: usize },

    #[error("conjugate gradients did not converge: {iterations} iterations, relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("operator is not positive definite (curvature {curvature:e} at iteration {iteration})")]
    NotPositiveDefinite { iteration: usize, curvature: f64 },

    #[error("dense guard exceeded: {what} = {size} > {limit}")]
    GuardExceeded {
        what: &'static str,
        size: u128,
        limit: u128,
    },

    #[error("measurement-space matrix asymmetry {asymmetry:e} exceeds guard")]
    NonSymmetric { asymmetry: f64 },

    #[error("estimator route {route} cannot evaluate {what}")]
    UnsupportedRoute { route: &'static str, what: &'static str },

    #[error("line search failed after {iterations} Gauss-Newton iterations (gradient norm {grad_norm:e})")]
    LineSearch {
        iterations: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("integration failed at time index {index} (t = {time})")]
    OdeBlowup { index: usize, time: f64 },

    #[error("too many failed MAP solves: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, OedError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(OedError::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
