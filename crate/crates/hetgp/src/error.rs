//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by model construction, evaluation and training.
#[derive(Debug, Error)]
pub enum Error {
    /// An input had the wrong dimensionality.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A caller-side precondition was violated (nonpositive variance,
    /// empty batch, out-of-range index, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Linear algebra failed even after jitter escalation.
    #[error("numerical failure in {context}: {message}")]
    Numerical {
        context: String,
        message: String,
    },

    /// Training produced a non-finite objective. Carries the iteration index
    /// and a snapshot of the unconstrained parameter vector at that step.
    #[error("non-finite objective at step {step}")]
    NonFiniteObjective {
        step: usize,
        snapshot: Box<[f64]>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numerical(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            message: message.into(),
        }
    }
}

/// Checks that two dimensions agree.
pub fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
