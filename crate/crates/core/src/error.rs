use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or input value is out of its documented range.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The trace breaks one or more structural invariants.
    #[error("trace has {} violation(s), first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    InvalidTrace(Vec<crate::trace::Violation>),

    #[error("planning error: {0}")]
    Planning(String),

    #[error("training error: loss is not finite at step {step}")]
    Training { step: usize },

    #[error("simulation error: {0}")]
    Simulation(String),

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input rather than a bug or I/O failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::Parse { .. }
                | Error::InvalidTrace(_)
                | Error::Planning(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
