//! Ensemble tracking: per-trace fits at every estimation time, followed by
//! the conditional-covariance analysis and the benchmark comparison.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::estimator::fid::{fit_global, FidModelParams, WeightParams};
use crate::estimator::stats::{
    benchmarks, conditional_covariance, db_below, polar_decompose, Benchmarks,
    ConditionalCovariance, PolarStats,
};
use crate::estimator::window::{fit_free_window, fit_phase_point, windows_fit, Side};
use crate::exec::Execution;
use crate::trajectory_sim::MeasurementTrace;

/// Largest tolerated fraction of failed per-trace fits.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

/// Analysis settings shared by tracking, gain checks and tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingSetup {
    /// Calibrated coupling, rad per unit spin.
    pub g: f64,
    /// Estimation times, μs.
    pub t_e: Vec<f64>,
    /// Window length Δt, μs.
    pub delta_t: f64,
    pub weights: WeightParams,
    /// Starting point of every global fit (`omega_l`, `t2` used).
    pub init: FidModelParams,
}

/// Where the classical benchmarks come from.
#[derive(Debug, Clone, PartialEq)]
pub enum BenchmarkSource {
    /// Generative truth attached to every trace.
    Truth,
    /// Spin length from the mean magnitude of the predictive estimates and
    /// atom number from a nominal per-pulse loss curve.
    Fitted { atoms_per_pulse: Vec<f64> },
}

/// Predictive/confirming estimates of every usable trace at one `t_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub t_e: f64,
    /// Indices of the traces that contributed, ascending.
    pub ids: Vec<usize>,
    pub f1: Vec<Vector2<f64>>,
    pub f2: Vec<Vector2<f64>>,
    /// Traces excluded because a fit failed.
    pub failed: usize,
    /// Included traces whose global fit raised a warning.
    pub warned: usize,
}

/// Tracking statistics at one estimation time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingRow {
    pub t_e: f64,
    pub n_traces: usize,
    pub n_failed: usize,
    pub n_warned: usize,
    pub cond: ConditionalCovariance,
    pub polar: PolarStats,
    pub bench: Benchmarks,
    pub db_rho: f64,
    pub db_psi: f64,
    /// Trace index of every residual in `cond.residuals`.
    pub ids: Vec<usize>,
}

/// Result of [`track_ensemble`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReport {
    pub delta_t: f64,
    pub rows: Vec<TrackingRow>,
}

impl TrackingReport {
    /// Mean `(db_rho, db_psi)` over rows with `t_e ≥ from`.
    pub fn steady_state_db(&self, from: f64) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.t_e >= from).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.db_rho).sum::<f64>() / n,
            rows.iter().map(|r| r.db_psi).sum::<f64>() / n,
        ))
    }

    /// First estimation time at which `var_psi` is below the SQL.
    pub fn sql_crossing(&self) -> Option<f64> {
        self.rows.iter().find(|r| r.db_psi > 0.0).map(|r| r.t_e)
    }
}

/// Point of a residual `𝓕` magnified about `center` for display:
/// `center + factor·𝓕`.
pub fn magnify_residual(
    center: &Vector2<f64>,
    residual: &Vector2<f64>,
    factor: f64,
) -> Vector2<f64> {
    center + residual * factor
}

/// Validate the setup against the traces.
fn check_setup(traces: &[MeasurementTrace], setup: &TrackingSetup) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::Domain("no traces".into()));
    }
    if setup.t_e.is_empty() {
        return Err(Error::Domain("no estimation times".into()));
    }
    if !(setup.g > 0.0) || !(setup.delta_t > 0.0) {
        return Err(Error::Domain("g and delta_t must be > 0".into()));
    }
    setup.weights.validate()?;
    for (i, tr) in traces.iter().enumerate() {
        for &t_e in &setup.t_e {
            if !windows_fit(&tr.times, t_e, setup.delta_t) {
                return Err(Error::Domain(format!(
                    "trace {i} cannot hold both windows at t_e = {t_e} us with delta_t = {} us",
                    setup.delta_t
                )));
            }
        }
    }
    Ok(())
}

/// Fit every trace at every estimation time and collect the estimate
/// pairs. A `t_e` with more than 10% failed traces is an error.
pub fn estimate_pairs(
    traces: &[MeasurementTrace],
    setup: &TrackingSetup,
    exec: Execution,
) -> Result<Vec<PairSet>> {
    check_setup(traces, setup)?;
    let n_tr = traces.len();
    let n_te = setup.t_e.len();
    let results = exec.map(n_tr * n_te, |k| {
        let (j, i) = (k / n_tr, k % n_tr);
        let t_e = setup.t_e[j];
        let trace = &traces[i];
        let global = fit_global(trace, setup.g, t_e, &setup.weights, &setup.init)?;
        let f1 = fit_phase_point(trace, &global.params, t_e, setup.delta_t, Side::Predictive)?;
        let f2 = fit_phase_point(trace, &global.params, t_e, setup.delta_t, Side::Confirming)?;
        Ok::<_, Error>((f1.f, f2.f, !global.fit.warnings.is_empty()))
    });
    let mut out = Vec::with_capacity(n_te);
    for (j, chunk) in results.chunks(n_tr).enumerate() {
        let mut set = PairSet {
            t_e: setup.t_e[j],
            ids: Vec::with_capacity(n_tr),
            f1: Vec::with_capacity(n_tr),
            f2: Vec::with_capacity(n_tr),
            failed: 0,
            warned: 0,
        };
        for (i, r) in chunk.iter().enumerate() {
            match r {
                Ok((a, b, warned)) => {
                    set.ids.push(i);
                    set.f1.push(*a);
                    set.f2.push(*b);
                    set.warned += *warned as usize;
                }
                Err(_) => set.failed += 1,
            }
        }
        if set.failed as f64 > MAX_FAILURE_FRACTION * n_tr as f64 {
            return Err(Error::Ensemble {
                failed: set.failed,
                total: n_tr,
            });
        }
        out.push(set);
    }
    Ok(out)
}

/// Full tracking analysis: fits, conditional covariance, polar variances,
/// benchmarks and dB margins for every estimation time.
pub fn track_ensemble(
    traces: &[MeasurementTrace],
    setup: &TrackingSetup,
    source: &BenchmarkSource,
    exec: Execution,
) -> Result<TrackingReport> {
    if let BenchmarkSource::Truth = source {
        if traces.iter().any(|t| t.truth.is_none()) {
            return Err(Error::Domain(
                "truth benchmarks requested but a trace has no truth record".into(),
            ));
        }
    }
    let sets = estimate_pairs(traces, setup, exec)?;
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let cond = conditional_covariance(&set.f1, &set.f2)?;
        let polar = polar_decompose(&cond.gamma_cond, &cond.mean_f1)?;
        let bench = match source {
            BenchmarkSource::Truth => {
                let (mut len, mut atoms) = (0.0, 0.0);
                for &i in &set.ids {
                    let tr = &traces[i];
                    let k = nearest_index(&tr.times, set.t_e);
                    let truth = tr.truth.as_ref().expect("checked above");
                    len += truth.fy[k].hypot(truth.fz[k]);
                    atoms += truth.atoms[k];
                }
                let n = set.ids.len() as f64;
                benchmarks(len / n, atoms / n)
            }
            BenchmarkSource::Fitted { atoms_per_pulse } => {
                let k = nearest_index(&traces[0].times, set.t_e);
                let atoms = *atoms_per_pulse.get(k).ok_or_else(|| {
                    Error::Domain(format!("no nominal atom number for pulse {k}"))
                })?;
                let len = set.f1.iter().map(|f| f.norm()).sum::<f64>() / set.f1.len() as f64;
                benchmarks(len, atoms)
            }
        };
        rows.push(TrackingRow {
            t_e: set.t_e,
            n_traces: set.ids.len(),
            n_failed: set.failed,
            n_warned: set.warned,
            db_rho: db_below(bench.poisson, polar.var_rho),
            db_psi: db_below(bench.sql, polar.var_psi),
            cond,
            polar,
            bench,
            ids: set.ids,
        });
    }
    Ok(TrackingReport {
        delta_t: setup.delta_t,
        rows,
    })
}

fn nearest_index(times: &[f64], t: f64) -> usize {
    times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Regression of free-parameter on fixed-parameter estimates for one
/// window side and spin component: `free ≈ γ·fixed + δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainPanel {
    pub side: Side,
    /// 0 for `Fy`, 1 for `Fz`.
    pub component: usize,
    pub gamma: f64,
    pub delta: f64,
    pub n: usize,
}

/// Result of [`fit_gain_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GainReport {
    pub panels: Vec<GainPanel>,
    /// (trace, `t_e`) points excluded because one of the fits failed.
    pub excluded: usize,
}

impl GainReport {
    pub fn max_deviation(&self) -> f64 {
        self.panels
            .iter()
            .map(|p| (p.gamma - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Compare fixed-classical-parameter window estimates with estimates from
/// window fits where every parameter is free. Points from every trace and
/// every estimation time of `setup` are pooled into one regression per
/// side and component, so the regressor spans the full precession circle.
pub fn fit_gain_check(
    traces: &[MeasurementTrace],
    setup: &TrackingSetup,
    exec: Execution,
) -> Result<GainReport> {
    if traces.len() < 50 {
        return Err(Error::Domain(format!(
            "gain check needs >= 50 traces, got {}",
            traces.len()
        )));
    }
    check_setup(traces, setup)?;
    let sides = [Side::Predictive, Side::Confirming];
    let n_te = setup.t_e.len();
    let results = exec.map(traces.len() * n_te, |k| {
        let trace = &traces[k / n_te];
        let t_e = setup.t_e[k % n_te];
        let global = fit_global(trace, setup.g, t_e, &setup.weights, &setup.init)?;
        let mut pairs = [(Vector2::zeros(), Vector2::zeros()); 2];
        for (s, side) in sides.iter().enumerate() {
            let fixed = fit_phase_point(trace, &global.params, t_e, setup.delta_t, *side)?;
            let free = fit_free_window(trace, &global.params, t_e, setup.delta_t, *side)?;
            pairs[s] = (fixed.f, free.f);
        }
        Ok::<_, Error>(pairs)
    });
    let ok: Vec<_> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let excluded = results.len() - ok.len();
    if ok.len() < 3 {
        return Err(Error::Ensemble {
            failed: excluded,
            total: results.len(),
        });
    }
    let mut panels = Vec::new();
    for (s, side) in sides.iter().enumerate() {
        for component in 0..2 {
            let x: Vec<f64> = ok.iter().map(|p| p[s].0[component]).collect();
            let y: Vec<f64> = ok.iter().map(|p| p[s].1[component]).collect();
            let (gamma, delta) = regression(&x, &y);
            panels.push(GainPanel {
                side: *side,
                component,
                gamma,
                delta,
                n: x.len(),
            });
        }
    }
    Ok(GainReport { panels, excluded })
}

/// Ordinary least-squares slope and intercept of `y` on `x`.
fn regression(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
