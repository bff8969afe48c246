use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A model or run parameter violates its documented constraint.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    /// A vector field or flow was evaluated outside its domain.
    #[error("domain error in {context}: {detail}")]
    Domain { context: String, detail: String },

    /// Correlation matrix is not positive-definite.
    #[error("correlation matrix is not positive-definite: pivot {pivot} is {value:e} (threshold {threshold:e})")]
    NotPositiveDefinite {
        pivot: usize,
        value: f64,
        threshold: f64,
    },

    #[error("linear system is singular at row {row}")]
    Singular { row: usize },

    #[error("ODE integration exhausted its budget of {max_steps} steps at t = {time}")]
    StepBudget { max_steps: usize, time: f64 },

    #[error("ODE integration failed at t = {time}: {source}")]
    Integration {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("value overflowed the floating-point range in {context}")]
    Overflow { context: String },

    #[error("step {step}, flow {flow}: {source}")]
    Step {
        step: usize,
        flow: String,
        #[source]
        source: Box<Error>,
    },

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn domain(context: &str, detail: impl Into<String>) -> Self {
        Error::Domain {
            context: context.to_string(),
            detail: detail.into(),
        }
    }

    /// True when the failure was raised by parameter or configuration validation
    /// rather than by a computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::Dimension { .. }
                | Error::Unsupported(_)
        )
    }
}
