use thiserror::Error;

/// Errors raised by the estimator, the generator, the channel simulators and
/// the analytic baselines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at iteration {iteration} (last finite iteration: {last_finite:?})")]
    Divergence {
        iteration: usize,
        last_finite: Option<usize>,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("no sign change of {0} in the search interval")]
    RootNotBracketed(&'static str),

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("malformed CSV at row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("malformed parameter file: {0}")]
    ParamFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], context: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context()))
    }
}
