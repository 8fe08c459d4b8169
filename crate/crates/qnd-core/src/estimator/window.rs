//! Disjoint-window linear estimates of `(Fy, Fz)` at an estimation time.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::estimator::fid::{fit_fid, FidModelParams};
use crate::trajectory_sim::MeasurementTrace;

/// Slack used when comparing sample times with window edges, μs.
const EDGE_EPS: f64 = 1e-9;

/// Which side of `t_e` a window lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    /// `[t_e − Δt, t_e)` clipped at the first sample: the predictive estimate `F₁`.
    Predictive,
    /// `(t_e, t_e + Δt]`: the confirming estimate `F₂`.
    Confirming,
}

impl Side {
    pub fn label(self) -> &'static str {
        match self {
            Side::Predictive => "predictive",
            Side::Confirming => "confirming",
        }
    }
}

/// Linear estimate of the spin at `t_e` from one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseEstimate {
    /// `(Fy, Fz)` at `t_e`, spin units.
    pub f: Vector2<f64>,
    pub t_e: f64,
    /// Window `(start, end)` in μs; open at the `t_e` end.
    pub window: (f64, f64),
    pub side: Side,
    pub n_points: usize,
}

/// Window bounds for `side`.
pub fn window_bounds(t_e: f64, delta_t: f64, side: Side) -> (f64, f64) {
    match side {
        Side::Predictive => (t_e - delta_t, t_e),
        Side::Confirming => (t_e, t_e + delta_t),
    }
}

/// Indices of the samples inside the window, excluding the sample at `t_e`.
pub fn window_indices(times: &[f64], t_e: f64, delta_t: f64, side: Side) -> Vec<usize> {
    let (a, b) = window_bounds(t_e, delta_t, side);
    times
        .iter()
        .enumerate()
        .filter(|(_, &t)| match side {
            Side::Predictive => t >= a - EDGE_EPS && t < b - EDGE_EPS,
            Side::Confirming => t > a + EDGE_EPS && t <= b + EDGE_EPS,
        })
        .map(|(i, _)| i)
        .collect()
}

/// True when `t_e` has recorded samples before it and the confirming window
/// ends inside the trace. The predictive window is clipped at the first
/// sample, so early estimation times use all of the available history.
pub fn windows_fit(times: &[f64], t_e: f64, delta_t: f64) -> bool {
    match (times.first(), times.last()) {
        (Some(&first), Some(&last)) => t_e > first + EDGE_EPS && t_e + delta_t <= last + EDGE_EPS,
        _ => false,
    }
}

/// Window bounds clipped to the samples actually used.
fn used_bounds(times: &[f64], idx: &[usize], t_e: f64, delta_t: f64, side: Side) -> (f64, f64) {
    let (a, b) = window_bounds(t_e, delta_t, side);
    match side {
        Side::Predictive => (a.max(times[idx[0]]), b),
        Side::Confirming => (a, b),
    }
}

/// Uniformly weighted least-squares estimate of `(Fy, Fz)` at `t_e` with the
/// classical parameters held fixed:
/// `φ(t) − φ₀ = g[Fz cos ωu − Fy sin ωu]·e^{−u/T2}`, `u = t − t_e`.
pub fn fit_phase_point(
    trace: &MeasurementTrace,
    params: &FidModelParams,
    t_e: f64,
    delta_t: f64,
    side: Side,
) -> Result<PhaseEstimate> {
    if !(delta_t > 0.0) {
        return Err(Error::Domain(format!("delta_t must be > 0, got {delta_t}")));
    }
    let idx = window_indices(&trace.times, t_e, delta_t, side);
    if idx.len() < 2 {
        return Err(Error::Rank(format!(
            "{} window at t_e = {t_e} us holds {} samples (need >= 2)",
            side.label(),
            idx.len()
        )));
    }
    let mut gram = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for &i in &idx {
        let u = trace.times[i] - t_e;
        let e = params.g * (-u / params.t2).exp();
        let (s, c) = (params.omega_l * u).sin_cos();
        let x = Vector2::new(-s * e, c * e);
        gram += x * x.transpose();
        rhs += x * (trace.angles[i] - params.phi0);
    }
    let scale = gram.trace();
    if !(scale > 0.0) || gram.determinant() <= 1e-12 * scale * scale {
        return Err(Error::Rank(format!(
            "{} window at t_e = {t_e} us is too short to separate Fy and Fz",
            side.label()
        )));
    }
    let f = gram
        .try_inverse()
        .ok_or_else(|| Error::Rank("singular normal matrix".into()))?
        * rhs;
    Ok(PhaseEstimate {
        f,
        t_e,
        window: used_bounds(&trace.times, &idx, t_e, delta_t, side),
        side,
        n_points: idx.len(),
    })
}

/// Estimate of `(Fy, Fz)` at `t_e` with every model parameter free
/// (`ω`, `T2`, offset and amplitudes fitted on the window alone), started
/// from `params`.
pub fn fit_free_window(
    trace: &MeasurementTrace,
    params: &FidModelParams,
    t_e: f64,
    delta_t: f64,
    side: Side,
) -> Result<PhaseEstimate> {
    let idx = window_indices(&trace.times, t_e, delta_t, side);
    if idx.len() < 6 {
        return Err(Error::Rank(format!(
            "free fit needs >= 6 samples, {} window has {}",
            side.label(),
            idx.len()
        )));
    }
    let t: Vec<f64> = idx.iter().map(|&i| trace.times[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| trace.angles[i]).collect();
    let w = vec![1.0; t.len()];
    let fit = fit_fid(&t, &y, &w, t_e, params.omega_l, params.t2)?;
    // coef = (g·Fz, −g·Fy, φ₀) in the basis (cos ωu, sin ωu, 1)·e^{−u/T2}.
    Ok(PhaseEstimate {
        f: Vector2::new(-fit.coef[1] / params.g, fit.coef[0] / params.g),
        t_e,
        window: used_bounds(&trace.times, &idx, t_e, delta_t, side),
        side,
        n_points: idx.len(),
    })
}
