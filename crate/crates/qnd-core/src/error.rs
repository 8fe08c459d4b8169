//! Error type shared by all modules.

use std::fmt;

use thiserror::Error;

use crate::spin_core::Violation;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Last iterate of a nonlinear fit that did not converge.
#[derive(Debug, Clone, PartialEq)]
pub struct FitFailure {
    pub iterations: usize,
    pub residual_norm: f64,
    pub omega: f64,
    pub t2: f64,
}

impl fmt::Display for FitFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "after {} iterations (residual norm {:.6e}, omega {:.6e} rad/us, T2 {:.6e} us)",
            self.iterations, self.residual_norm, self.omega, self.t2
        )
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A state invariant (PSD, Robertson, spin length) was violated.
    #[error("state validity error in {context}: {}", format_violations(.violations))]
    StateValidity {
        context: String,
        violations: Vec<Violation>,
    },

    /// A nonlinear fit failed to converge.
    #[error("fit did not converge {0}")]
    NonConvergence(FitFailure),

    /// A fit produced a non-finite result.
    #[error("fit produced non-finite values: {0}")]
    NonFinite(String),

    /// A linear least-squares problem was rank deficient.
    #[error("rank deficient: {0}")]
    Rank(String),

    /// A covariance block that must be inverted is singular.
    #[error("ill-conditioned covariance: {0}")]
    Conditioning(String),

    /// The polar direction is undefined for a zero mean vector.
    #[error("direction undefined: mean vector is zero")]
    DirectionUndefined,

    /// Too many per-trace failures in an ensemble operation.
    #[error("{failed} of {total} traces failed (limit 10%)")]
    Ensemble { failed: usize, total: usize },

    /// A failure attributed to a single trace of an ensemble.
    #[error("trace {index}: {source}")]
    Trace {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Density and probe beam do not overlap.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
