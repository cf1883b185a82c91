//! Error type shared by every solver in the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, ItuError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ItuError {
    /// A model, market or sample is malformed. `field` names the offending
    /// input location (e.g. `tech.x1|y2.tau`).
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },

    /// A well-formed object was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An iterative method exhausted its budget.
    #[error("{solver} did not converge after {iterations} iterations (last residual {residual:e})")]
    Convergence {
        solver: String,
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    /// A solver could not find a valid starting point.
    #[error("initialization failed: {0}")]
    Initialization(String),

    /// A linear system was singular or too badly conditioned to be trusted.
    #[error("numerical failure: {message} (condition estimate {condition:e})")]
    Numerical { message: String, condition: f64 },

    /// The likelihood optimizer stopped without meeting its criterion.
    #[error("optimization failed: {message}")]
    Optimization { message: String, trace: Vec<f64> },
}

impl ItuError {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        ItuError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn domain(message: impl Into<String>) -> Self {
        ItuError::Domain(message.into())
    }

    /// Prefixes the field path of a validation error, leaving other kinds untouched.
    pub fn within(self, prefix: &str) -> Self {
        match self {
            ItuError::Validation { field, message } => ItuError::Validation {
                field: if field.is_empty() {
                    prefix.to_string()
                } else {
                    format!("{prefix}.{field}")
                },
                message,
            },
            other => other,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            ItuError::Validation { .. } => "validation",
            ItuError::Domain(_) => "domain",
            ItuError::Convergence { .. } => "convergence",
            ItuError::Initialization(_) => "initialization",
            ItuError::Numerical { .. } => "numerical",
            ItuError::Optimization { .. } => "optimization",
        }
    }
}
