//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid caller-supplied input (dimension mismatch, bad parameter, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A numerical routine failed beyond its recovery policy (jitter, damping).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Operation not defined for this variant (e.g. determinant identity on a
    /// kernel without explicit features).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Newton failed to reach the residual tolerance within the iteration cap.
    /// Carries the last iterate so callers can inspect or salvage it.
    #[error("newton did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
}
