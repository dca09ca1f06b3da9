use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration:\n{0}")]
    Validation(ValidationReport),

    /// A closed-form path was requested for a configuration that does not
    /// satisfy its hypotheses.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("N(t) is numerically singular at t = {t} (1-norm condition estimate {condition:.3e})")]
    SingularFlow { t: f64, condition: f64 },

    #[error("Riccati integration diverged at t = {t} (|R| entry {magnitude:.3e} exceeds bound)")]
    Divergence { t: f64, magnitude: f64 },

    #[error("matrix exponential overflow: scaled norm {norm:.3e} out of range")]
    ExpmOverflow { norm: f64 },

    #[error("time {t} outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("event cap of {cap} exceeded before t = {t}")]
    EventCap { cap: u64, t: f64 },

    #[error("exponential fit invalid: {0}")]
    FitInvalid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical solvers (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularFlow { .. }
                | Error::Divergence { .. }
                | Error::ExpmOverflow { .. }
                | Error::NonFinite { .. }
                | Error::EventCap { .. }
                | Error::FitInvalid(_)
        )
    }
}
