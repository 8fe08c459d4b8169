//! Simulation and estimation toolkit for back-action-evading tracking of a
//! precessing collective atomic spin under pulsed QND Faraday probing.
//!
//! The crate is organised bottom-up:
//!
//! * [`spin_core`] — Gaussian spin state and the exact per-pulse maps
//!   (precession, QND measurement with back-action, scattering loss).
//! * [`trajectory_sim`] — seeded Monte Carlo generation of Faraday-rotation
//!   records, one per experimental repetition.
//! * [`estimator`] — FID fitting, predictive/confirming window estimates,
//!   conditional covariance, polar decomposition and classical benchmarks.
//! * [`calibration`] — stroboscopic α/β propagation, μ₁/μ₂ fits and coupling
//!   moments of inhomogeneous ensembles.
//! * [`tuning`] — weight-function optimisation and measurement-window sweeps.
//!
//! Units are fixed throughout: time in μs, angles in rad, spin components in
//! units of ħ, atom and photon numbers dimensionless.
//!
//! Ensemble-level work goes through [`exec::Execution`]; with the default
//! `parallel` feature it fans out over rayon, otherwise it runs sequentially.
//! Both paths return bit-identical results.

// Domain checks are written as `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod spin_core;
pub mod trajectory_sim;
pub mod tuning;

pub use error::{Error, Result};
