//! Analysis chain for tracking the spin from measurement records.
//!
//! For each trace and estimation time `t_e`:
//!
//! 1. [`fit_global`] fits the FID model to the whole trace with weights
//!    concentrated near `t_e`, yielding `(ω_L, T2, φ₀)`.
//! 2. [`fit_phase_point`] forms the predictive estimate `F₁` from
//!    `[t_e − Δt, t_e)` and the confirming estimate `F₂` from
//!    `(t_e, t_e + Δt]` by linear least squares with those parameters fixed.
//!
//! Across the ensemble, [`conditional_covariance`] gives the error of the
//! best linear prediction of `F₂` from `F₁`, which [`polar_decompose`]
//! splits into radial and azimuthal parts for comparison with the
//! Poissonian and standard-quantum-limit [`benchmarks`].

pub mod fid;
pub mod stats;
pub mod tracking;
pub mod window;

pub use fid::{fit_fid, fit_global, FidFit, FidModelParams, FitWarning, GlobalFit, WeightParams};
pub use stats::{
    benchmarks, conditional_covariance, db_below, joint_covariance, polar_decompose, psi_hat,
    rho_hat, Benchmarks, ConditionalCovariance, PolarStats,
};
pub use tracking::{
    estimate_pairs, fit_gain_check, magnify_residual, track_ensemble, BenchmarkSource, GainPanel,
    GainReport, PairSet, TrackingReport, TrackingRow, TrackingSetup,
};
pub use window::{
    fit_free_window, fit_phase_point, window_bounds, window_indices, windows_fit, PhaseEstimate,
    Side,
};
