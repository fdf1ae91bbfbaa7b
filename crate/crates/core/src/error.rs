use thiserror::Error;

pub type Result<T> = std::result::Result<T, VpError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VpError {
    #[error("unknown target '{0}'")]
    UnknownTarget(String),

    #[error("invalid parameter '{name}': {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported dimension {0}")]
    UnsupportedDimension(usize),

    #[error("time {t} outside validity window [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("posterior weights underflow at t={t}, x={x:?}: point lies beyond quadrature coverage")]
    TailUnderflow { t: f64, x: Vec<f64> },

    #[error("integration exceeded {max_steps} steps at t={t}")]
    StepLimit { max_steps: usize, t: f64 },

    #[error("step size underflow at t={t}")]
    StepUnderflow { t: f64 },

    #[error("score evaluation failed along trajectory at t={t}: {source}")]
    Trajectory { t: f64, source: Box<VpError> },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("singular jacobian at {0:?}")]
    SingularJacobian(Vec<f64>),

    #[error("absolute continuity violated at {count} grid points (first at {first:?})")]
    AbsoluteContinuity { count: usize, first: Vec<f64> },

    #[error("fixed-point inversion did not converge after {iterations} iterations (residual {residual:e})")]
    InversionFailed { iterations: usize, residual: f64 },

    #[error("spectral certification failed for layer {layer}: sigma {sigma} > bound {bound}")]
    Certification { layer: usize, sigma: f64, bound: f64 },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("tail-guard resampling budget exhausted ({failures} failures)")]
    ResampleBudget { failures: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for VpError {
    fn from(e: std::io::Error) -> Self {
        VpError::Io(e.to_string())
    }
}

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> VpError {
    VpError::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
