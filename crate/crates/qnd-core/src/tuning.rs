//! Empirical tuning of the analysis: weight-function optimisation and the
//! measurement-window (Δt) sweep, both minimising the total conditional
//! variance `Tr(Γ_{F2|F1})`.

use nalgebra::{DVector, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::estimator::tracking::{estimate_pairs, PairSet, TrackingSetup};
use crate::estimator::window::windows_fit;
use crate::exec::Execution;
use crate::trajectory_sim::MeasurementTrace;

pub use crate::estimator::fid::WeightParams;

/// Stopping rules of [`nelder_mead`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    /// Stop when the simplex diameter falls below `tol·max(1, |x_best|)`.
    pub tol: f64,
    /// Objective evaluation budget, shared by all restarts.
    pub max_evals: usize,
    /// Initial simplex edge along each coordinate.
    pub step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            tol: 1e-4,
            max_evals: 200,
            step: 0.5,
        }
    }
}

/// Result of [`nelder_mead`].
#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    /// Best objective seen after each evaluation (non-increasing).
    pub history: Vec<f64>,
    /// The simplex collapsed below the tolerance before the budget ran out.
    pub converged: bool,
    /// The restart from the first optimum reproduced it within 1e−3.
    pub restart_agrees: bool,
}

/// Downhill-simplex minimisation with one restart from the first optimum.
///
/// Non-finite objective values are treated as `+∞`, so failed evaluations
/// steer the simplex away instead of aborting the search.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut evals = 0usize;
    let mut eval = |x: &[f64], history: &mut Vec<f64>, best: &mut f64, evals: &mut usize| {
        let v = f(x);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        *evals += 1;
        if v < *best {
            *best = v;
        }
        history.push(*best);
        v
    };

    let mut run = |start: &[f64],
                   history: &mut Vec<f64>,
                   best: &mut f64,
                   evals: &mut usize|
     -> (Vec<f64>, f64, bool) {
        let n = start.len();
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let f0 = eval(start, history, best, evals);
        simplex.push((start.to_vec(), f0));
        for i in 0..n {
            if *evals >= opts.max_evals {
                break;
            }
            let mut x = start.to_vec();
            x[i] += opts.step;
            let v = eval(&x, history, best, evals);
            simplex.push((x, v));
        }
        if simplex.len() < n + 1 {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (x, v) = simplex.swap_remove(0);
            return (x, v, false);
        }
        loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let diameter = simplex[1..]
                .iter()
                .map(|(x, _)| dist(x, &simplex[0].0))
                .fold(0.0, f64::max);
            let scale = norm(&simplex[0].0).max(1.0);
            if diameter < opts.tol * scale {
                return (simplex[0].0.clone(), simplex[0].1, true);
            }
            if *evals >= opts.max_evals {
                return (simplex[0].0.clone(), simplex[0].1, false);
            }
            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
                .collect();
            let worst = simplex[n].clone();
            let along = |t: f64| -> Vec<f64> {
                (0..n)
                    .map(|j| centroid[j] + t * (worst.0[j] - centroid[j]))
                    .collect()
            };
            let xr = along(-1.0);
            let fr = eval(&xr, history, best, evals);
            if fr < simplex[0].1 {
                if *evals >= opts.max_evals {
                    simplex[n] = (xr, fr);
                    continue;
                }
                let xe = along(-2.0);
                let fe = eval(&xe, history, best, evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
                continue;
            }
            if *evals >= opts.max_evals {
                continue;
            }
            let (xc, fc) = if fr < worst.1 {
                let x = along(-0.5);
                let v = eval(&x, history, best, evals);
                (x, v)
            } else {
                let x = along(0.5);
                let v = eval(&x, history, best, evals);
                (x, v)
            };
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
                continue;
            }
            // Shrink towards the best vertex.
            let b = simplex[0].0.clone();
            for v in simplex.iter_mut().skip(1) {
                if *evals >= opts.max_evals {
                    break;
                }
                let x: Vec<f64> = (0..n).map(|j| b[j] + 0.5 * (v.0[j] - b[j])).collect();
                let fx = eval(&x, history, best, evals);
                *v = (x, fx);
            }
        }
    };

    let (x1, f1, c1) = run(x0, &mut history, &mut best, &mut evals);
    let mut result = (x1.clone(), f1, c1, false);
    if evals < opts.max_evals {
        let (x2, f2, c2) = run(&x1, &mut history, &mut best, &mut evals);
        let agree = (f2 - f1).abs() <= 1e-3 * f1.abs()
            || dist(&x1, &x2) <= 10.0 * opts.tol * norm(&x1).max(1.0);
        result = if f2 < f1 {
            (x2, f2, c2, agree)
        } else {
            (x1, f1, c1, agree)
        };
    }
    NelderMeadResult {
        x: result.0,
        f: result.1,
        evaluations: evals,
        history,
        converged: result.2,
        restart_agrees: result.3,
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean of `Tr(Γ_{F2|F1})` over the setup's estimation times.
pub fn tracking_objective(
    traces: &[MeasurementTrace],
    setup: &TrackingSetup,
    exec: Execution,
) -> Result<f64> {
    let sets = estimate_pairs(traces, setup, exec)?;
    let mut total = 0.0;
    for s in &sets {
        total += cond_trace(&s.f1, &s.f2)?;
    }
    Ok(total / sets.len() as f64)
}

/// Result of [`optimize_weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightOptimization {
    pub weights: WeightParams,
    pub objective: f64,
    /// Objective of the starting weights.
    pub initial_objective: f64,
    /// Best-so-far objective after each evaluation.
    pub history: Vec<f64>,
    pub evaluations: usize,
    pub converged: bool,
}

/// Map weights to the unconstrained search space
/// `(ln(1+A), ln w, ln(1+r))`.
fn to_search(w: &WeightParams) -> Vec<f64> {
    vec![w.amp.ln_1p(), w.width.ln(), w.imbalance_slope.ln_1p()]
}

fn from_search(x: &[f64], template: &WeightParams) -> WeightParams {
    WeightParams {
        amp: x[0].exp_m1().max(0.0),
        width: x[1].exp(),
        imbalance_slope: x[2].exp_m1().max(0.0),
        t2: template.t2,
    }
}

/// Minimise an arbitrary weight objective; the tracking pipeline is one
/// choice ([`optimize_weights`]), test hooks are another.
pub fn optimize_weights_with<F>(
    mut objective: F,
    init: &WeightParams,
    opts: &NelderMeadOptions,
) -> Result<WeightOptimization>
where
    F: FnMut(&WeightParams) -> Result<f64>,
{
    init.validate()?;
    let initial_objective = objective(init).unwrap_or(f64::INFINITY);
    let mut first = Some(initial_objective);
    let res = nelder_mead(
        |x| {
            let w = from_search(x, init);
            // Reuse the evaluation of the starting point.
            if let Some(v) = first.take() {
                return v;
            }
            objective(&w).unwrap_or(f64::INFINITY)
        },
        &to_search(init),
        opts,
    );
    let (weights, value) = if res.f <= initial_objective {
        (from_search(&res.x, init), res.f)
    } else {
        (*init, initial_objective)
    };
    Ok(WeightOptimization {
        weights,
        objective: value,
        initial_objective,
        history: res.history,
        evaluations: res.evaluations,
        converged: res.converged,
    })
}

/// Optimise `(A, w, r)` of the weight function for the tracking objective.
pub fn optimize_weights(
    traces: &[MeasurementTrace],
    setup: &TrackingSetup,
    opts: &NelderMeadOptions,
    exec: Execution,
) -> Result<WeightOptimization> {
    if traces.len() < 50 {
        return Err(Error::Domain(format!(
            "weight optimisation needs >= 50 traces, got {}",
            traces.len()
        )));
    }
    optimize_weights_with(
        |w| {
            let s = TrackingSetup {
                weights: *w,
                ..setup.clone()
            };
            tracking_objective(traces, &s, exec)
        },
        &setup.weights,
        opts,
    )
}

/// One row of the Δt sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub delta_t: f64,
    /// Mean of `Tr(Γ_{F2|F1})` over the estimation times.
    pub trace_gamma_cond: f64,
    /// Leave-one-trace-out jackknife standard error.
    pub stderr: f64,
}

/// Result of [`sweep_delta_t`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Evaluated candidates in input order.
    pub rows: Vec<SweepRow>,
    /// Candidates whose windows do not fit inside the traces.
    pub skipped: Vec<f64>,
}

impl SweepResult {
    pub fn argmin(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .min_by(|a, b| a.trace_gamma_cond.total_cmp(&b.trace_gamma_cond))
    }

    /// True when the minimum is strictly below both end points of the
    /// candidate range (ordered by Δt).
    pub fn has_interior_minimum(&self) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.delta_t.total_cmp(&b.delta_t));
        let Some(min) = self.argmin() else {
            return false;
        };
        rows.len() >= 3
            && min.trace_gamma_cond < rows[0].trace_gamma_cond
            && min.trace_gamma_cond < rows[rows.len() - 1].trace_gamma_cond
    }
}

/// Evaluate the tracking objective for every candidate window length.
pub fn sweep_delta_t(
    traces: &[MeasurementTrace],
    setup: &TrackingSetup,
    candidates: &[f64],
    exec: Execution,
) -> Result<SweepResult> {
    if candidates.is_empty() {
        return Err(Error::Domain("no delta_t candidates".into()));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &dt in candidates {
        let fits = traces
            .iter()
            .all(|tr| setup.t_e.iter().all(|&t_e| windows_fit(&tr.times, t_e, dt)));
        if !fits {
            skipped.push(dt);
            continue;
        }
        let s = TrackingSetup {
            delta_t: dt,
            ..setup.clone()
        };
        let sets = estimate_pairs(traces, &s, exec)?;
        let (value, stderr) = jackknife_trace(&sets, traces.len())?;
        rows.push(SweepRow {
            delta_t: dt,
            trace_gamma_cond: value,
            stderr,
        });
    }
    Ok(SweepResult { rows, skipped })
}

fn cond_trace(f1: &[nalgebra::Vector2<f64>], f2: &[nalgebra::Vector2<f64>]) -> Result<f64> {
    Ok(crate::estimator::stats::conditional_covariance(f1, f2)?
        .gamma_cond
        .trace())
}

/// Trace of the conditional covariance from accumulated moments.
fn trace_from_moments(s1: &Vector4<f64>, s2: &Matrix4<f64>, n: f64) -> Result<f64> {
    let mean = s1 / n;
    let cov = (s2 - mean * s1.transpose()) / (n - 1.0);
    let g1 = cov.fixed_view::<2, 2>(0, 0).into_owned();
    let g2 = cov.fixed_view::<2, 2>(2, 2).into_owned();
    let g21 = cov.fixed_view::<2, 2>(2, 0).into_owned();
    let inv = g1
        .try_inverse()
        .ok_or_else(|| Error::Conditioning("predictive covariance is singular".into()))?;
    Ok((g2 - g21 * inv * g21.transpose()).trace())
}

/// Mean over estimation times of `Tr(Γ_{F2|F1})` and its jackknife
/// standard error (leaving out one trace at a time across all times).
fn jackknife_trace(sets: &[PairSet], n_traces: usize) -> Result<(f64, f64)> {
    struct Acc {
        s1: Vector4<f64>,
        s2: Matrix4<f64>,
        n: f64,
        rows: Vec<Option<Vector4<f64>>>,
    }
    let accs: Vec<Acc> = sets
        .iter()
        .map(|s| {
            let mut rows = vec![None; n_traces];
            let mut s1 = Vector4::zeros();
            let mut s2 = Matrix4::zeros();
            for ((&id, a), b) in s.ids.iter().zip(&s.f1).zip(&s.f2) {
                let v = Vector4::new(a[0], a[1], b[0], b[1]);
                s1 += v;
                s2 += v * v.transpose();
                rows[id] = Some(v);
            }
            Acc {
                s1,
                s2,
                n: s.ids.len() as f64,
                rows,
            }
        })
        .collect();
    let m = accs.len() as f64;
    // Full-sample value uses the same conditional-covariance routine as
    // the tracking report.
    let mut full = 0.0;
    for s in sets {
        full += cond_trace(&s.f1, &s.f2)?;
    }
    full /= m;

    let mut loo = DVector::<f64>::zeros(n_traces);
    for i in 0..n_traces {
        let mut total = 0.0;
        for a in &accs {
            total += match a.rows[i] {
                Some(v) => trace_from_moments(&(a.s1 - v), &(a.s2 - v * v.transpose()), a.n - 1.0)?,
                None => trace_from_moments(&a.s1, &a.s2, a.n)?,
            };
        }
        loo[i] = total / m;
    }
    let n = n_traces as f64;
    let mean = loo.mean();
    let var = loo.iter().map(|x| (x - mean).powi(2)).sum::<f64>() * (n - 1.0) / n;
    Ok((full, var.sqrt()))
}
