use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the solver stack.
///
/// Validation failures (bad inputs, violated preconditions) are kept apart
/// from numerical failures (invariant violations detected while computing)
/// so callers such as the CLI can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("measure is not admissible: {0}")]
    Admissibility(String),

    #[error("kernel is not square integrable: {0}")]
    NotSquareIntegrable(String),

    #[error("kernel is singular at t = {t}")]
    SingularKernel { t: f64 },

    #[error("N-hat is singular at t = {t} (smallest eigenvalue {eigmin:e})")]
    SingularControlWeight { t: f64, eigmin: f64 },

    #[error("invariant `{invariant}` violated at t = {t}: {detail}")]
    InvariantViolation {
        invariant: &'static str,
        t: f64,
        detail: String,
    },

    #[error("stiffness guard: max node * step = {ratio:e} exceeds {limit}; refine the grid")]
    Stiff { ratio: f64, limit: f64 },

    #[error("non-finite value in simulation at step {step}")]
    NonFinite { step: usize },

    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures detected during computation rather than input validation.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularControlWeight { .. }
                | Error::InvariantViolation { .. }
                | Error::NonFinite { .. }
                | Error::Stiff { .. }
        )
    }

    /// Short name of the violated invariant or precondition.
    pub fn invariant_name(&self) -> &'static str {
        match self {
            Error::InvalidParameter { name, .. } => name,
            Error::DimensionMismatch { context, .. } => context,
            Error::Admissibility(_) => "admissibility",
            Error::NotSquareIntegrable(_) => "square_integrability",
            Error::SingularKernel { .. } => "kernel_singularity",
            Error::SingularControlWeight { .. } => "nhat_invertible",
            Error::InvariantViolation { invariant, .. } => invariant,
            Error::Stiff { .. } => "stiffness_guard",
            Error::NonFinite { .. } => "finite_paths",
            Error::TimeOutOfRange { .. } => "time_range",
            Error::Degenerate(_) => "degenerate_input",
            Error::Csv(_) => "csv",
            Error::Io(_) => "io",
        }
    }
}
