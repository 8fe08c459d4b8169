//! Weighted free-induction-decay fits.
//!
//! The model `φ(t) = (a cos ωu + b sin ωu)·e^{−u/T2} + c`, `u = t − t₀`,
//! is linear in `(a, b, c)` and nonlinear in `(ω, 1/T2)`. The linear
//! coefficients are profiled out (variable projection) and the remaining
//! two-parameter problem is solved with Levenberg–Marquardt using the
//! Kaufman approximation of the projected Jacobian.

use nalgebra::{DVector, Dyn, Matrix2, Matrix3, OMatrix, Vector2, Vector3, U2};

use crate::error::{Error, FitFailure, Result};
use crate::trajectory_sim::MeasurementTrace;

/// Lower and upper bounds on the fitted coherence time, μs.
pub const T2_BOUNDS: (f64, f64) = (10.0, 1e5);
/// Relative parameter change that counts as converged.
pub const FIT_TOLERANCE: f64 = 1e-9;
/// Iteration cap of the damped least-squares loop.
pub const MAX_ITERATIONS: usize = 200;
/// Minimum number of samples for a global fit.
pub const MIN_GLOBAL_POINTS: usize = 20;

/// Classical parameters of the FID model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidModelParams {
    /// Coupling, rad per unit spin (fixed from calibration).
    pub g: f64,
    /// Larmor angular frequency, rad/μs.
    pub omega_l: f64,
    /// Coherence time, μs.
    pub t2: f64,
    /// Polarimeter offset, rad.
    pub phi0: f64,
}

/// Empirical weight function of the global fit,
/// `W(t, φ) = (1 + amp·exp(−width·|t − t_e|/t2)) / (1 + imbalance_slope·|φ|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightParams {
    /// Peak extra weight near `t_e` (`A ≥ 0`).
    pub amp: f64,
    /// Localisation rate in units of `1/t2` (`w > 0`).
    pub width: f64,
    /// Down-weighting of large rotation signals (`r ≥ 0`).
    pub imbalance_slope: f64,
    /// Coherence time entering the localisation exponent, μs.
    pub t2: f64,
}

impl WeightParams {
    /// Uniform weights.
    pub fn uniform() -> Self {
        WeightParams {
            amp: 0.0,
            width: 1.0,
            imbalance_slope: 0.0,
            t2: 1600.0,
        }
    }

    /// Default localisation used by the tracking pipeline: the fit is
    /// concentrated within about 64 μs of the estimation time.
    pub fn tracking_default() -> Self {
        WeightParams {
            amp: 300.0,
            width: 25.0,
            imbalance_slope: 0.0,
            t2: 1600.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.amp.is_finite()
            && self.amp >= 0.0
            && self.width.is_finite()
            && self.width > 0.0
            && self.imbalance_slope.is_finite()
            && self.imbalance_slope >= 0.0
            && self.t2.is_finite()
            && self.t2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid weight parameters {self:?}")))
        }
    }

    /// Weight of the sample `(t, φ)` for an estimate at `t_e`.
    pub fn weight(&self, t: f64, phi: f64, t_e: f64) -> f64 {
        let num = 1.0 + self.amp * (-self.width * (t - t_e).abs() / self.t2).exp();
        num / (1.0 + self.imbalance_slope * phi.abs())
    }
}

/// Non-fatal diagnostics of a fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitWarning {
    /// The coherence time ended on one of [`T2_BOUNDS`].
    T2AtBound(f64),
    /// The oscillating amplitude is not significant against the residuals
    /// (power signal-to-noise ratio given).
    NoSignificantSignal(f64),
}

/// Result of a variable-projection fit on a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FidFit {
    pub omega: f64,
    pub t2: f64,
    /// Coefficients of `(cos ωu·e^{−u/T2}, sin ωu·e^{−u/T2}, 1)`.
    pub coef: Vector3<f64>,
    /// Time origin `t₀` of the basis.
    pub origin: f64,
    pub iterations: usize,
    /// Weighted residual sum of squares.
    pub cost: f64,
    pub warnings: Vec<FitWarning>,
}

/// Global fit of one trace with the weight window centred at `t_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFit {
    pub params: FidModelParams,
    pub fit: FidFit,
}

/// Weighted nonlinear least-squares fit of the FID model to the whole
/// trace. `init` supplies the starting `(ω, T2)`; `g` is carried through.
pub fn fit_global(
    trace: &MeasurementTrace,
    g: f64,
    t_e: f64,
    weights: &WeightParams,
    init: &FidModelParams,
) -> Result<GlobalFit> {
    if trace.len() < MIN_GLOBAL_POINTS {
        return Err(Error::Domain(format!(
            "global fit needs >= {MIN_GLOBAL_POINTS} points, trace has {}",
            trace.len()
        )));
    }
    let (first, last) = (trace.times[0], trace.times[trace.len() - 1]);
    if !(t_e >= first && t_e <= last) {
        return Err(Error::Domain(format!(
            "t_e = {t_e} us outside trace span [{first}, {last}]"
        )));
    }
    if !(g > 0.0) {
        return Err(Error::Domain("g must be > 0".into()));
    }
    weights.validate()?;
    let w: Vec<f64> = trace
        .times
        .iter()
        .zip(&trace.angles)
        .map(|(&t, &phi)| weights.weight(t, phi, t_e))
        .collect();
    let fit = fit_fid(&trace.times, &trace.angles, &w, 0.0, init.omega_l, init.t2)?;
    Ok(GlobalFit {
        params: FidModelParams {
            g,
            omega_l: fit.omega,
            t2: fit.t2,
            phi0: fit.coef[2],
        },
        fit,
    })
}

/// Variable-projection Levenberg–Marquardt fit of
/// `(a cos ωu + b sin ωu)·e^{−u/T2} + c` with `u = t − origin` and sample
/// weights `w`.
pub fn fit_fid(
    t: &[f64],
    y: &[f64],
    w: &[f64],
    origin: f64,
    omega0: f64,
    t2_0: f64,
) -> Result<FidFit> {
    if t.len() != y.len() || t.len() != w.len() {
        return Err(Error::Domain("fit inputs differ in length".into()));
    }
    if t.len() < 5 {
        return Err(Error::Domain("fit needs at least 5 samples".into()));
    }
    if !(omega0.is_finite() && t2_0.is_finite() && t2_0 > 0.0) {
        return Err(Error::Domain("invalid initial fit parameters".into()));
    }
    let problem = Projected {
        t,
        y,
        sw: w.iter().map(|x| x.sqrt()).collect(),
        origin,
    };
    let rate_bounds = (1.0 / T2_BOUNDS.1, 1.0 / T2_BOUNDS.0);
    let mut theta = Vector2::new(omega0, (1.0 / t2_0).clamp(rate_bounds.0, rate_bounds.1));
    let mut cur = problem.evaluate(&theta, true)?;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let jac = cur.jac.as_ref().expect("jacobian requested");
        let jtj = jac.transpose() * jac;
        let jtr = jac.transpose() * cur.residual_vec();
        let diag = Matrix2::from_diagonal(&jtj.diagonal().map(|d| d.max(1e-300)));
        let mut accepted = false;
        while lambda < 1e16 {
            let lhs = jtj + diag * lambda;
            let Some(step) = lhs.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = theta + step;
            trial[1] = trial[1].clamp(rate_bounds.0, rate_bounds.1);
            match problem.evaluate(&trial, true) {
                Ok(next) if next.cost <= cur.cost => {
                    let small = (0..2).all(|i| {
                        (trial[i] - theta[i]).abs() <= FIT_TOLERANCE * theta[i].abs().max(1e-300)
                    });
                    theta = trial;
                    cur = next;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if small {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            // No descent direction improves the cost: the iterate is a
            // stationary point to working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(FitFailure {
            iterations,
            residual_norm: cur.cost.sqrt(),
            omega: theta[0],
            t2: 1.0 / theta[1],
        }));
    }
    if !(theta.iter().all(|x| x.is_finite()) && cur.coef.iter().all(|x| x.is_finite())) {
        return Err(Error::NonFinite("fitted FID parameters".into()));
    }

    let mut warnings = Vec::new();
    let t2 = 1.0 / theta[1];
    if theta[1] <= rate_bounds.0 * (1.0 + 1e-12) || theta[1] >= rate_bounds.1 * (1.0 - 1e-12) {
        warnings.push(FitWarning::T2AtBound(t2));
    }
    let snr = problem.signal_to_noise(&theta, &cur.coef, cur.cost);
    if snr < 25.0 {
        warnings.push(FitWarning::NoSignificantSignal(snr));
    }
    Ok(FidFit {
        omega: theta[0],
        t2,
        coef: cur.coef,
        origin,
        iterations,
        cost: cur.cost,
        warnings,
    })
}

struct Projected<'a> {
    t: &'a [f64],
    y: &'a [f64],
    sw: Vec<f64>,
    origin: f64,
}

type Jacobian = OMatrix<f64, Dyn, U2>;

struct Evaluation {
    coef: Vector3<f64>,
    residual: Vec<f64>,
    cost: f64,
    jac: Option<Jacobian>,
}

impl Evaluation {
    fn residual_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.residual)
    }
}

impl Projected<'_> {
    fn basis(&self, theta: &Vector2<f64>, t: f64) -> ([f64; 3], [[f64; 3]; 2]) {
        let u = t - self.origin;
        let e = (-theta[1] * u).exp();
        let (s, c) = (theta[0] * u).sin_cos();
        let f = [c * e, s * e, 1.0];
        let d_omega = [-u * s * e, u * c * e, 0.0];
        let d_rate = [-u * c * e, -u * s * e, 0.0];
        (f, [d_omega, d_rate])
    }

    fn evaluate(&self, theta: &Vector2<f64>, with_jac: bool) -> Result<Evaluation> {
        let n = self.t.len();
        let mut gram = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let (f, d) = self.basis(theta, self.t[i]);
            let sw = self.sw[i];
            let b = Vector3::new(f[0] * sw, f[1] * sw, f[2] * sw);
            gram += b * b.transpose();
            rhs += b * (self.y[i] * sw);
            rows.push((b, d));
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Rank("FID basis is rank deficient".into()))?;
        let coef = chol.solve(&rhs);
        let mut residual = Vec::with_capacity(n);
        let mut cost = 0.0;
        for (i, (b, _)) in rows.iter().enumerate() {
            let r = self.y[i] * self.sw[i] - b.dot(&coef);
            cost += r * r;
            residual.push(r);
        }
        if !cost.is_finite() {
            return Err(Error::NonFinite("FID residual".into()));
        }
        let jac = if with_jac {
            let mut jac = Jacobian::zeros(n);
            for j in 0..2 {
                // d_j = sqrt(w)·(∂B/∂θ_j)·coef, then project out span(B).
                let dcol: Vec<f64> = rows
                    .iter()
                    .enumerate()
                    .map(|(i, (_, d))| {
                        self.sw[i] * (d[j][0] * coef[0] + d[j][1] * coef[1] + d[j][2] * coef[2])
                    })
                    .collect();
                let mut btd = Vector3::zeros();
                for (i, (b, _)) in rows.iter().enumerate() {
                    btd += b * dcol[i];
                }
                let proj = chol.solve(&btd);
                for (i, (b, _)) in rows.iter().enumerate() {
                    jac[(i, j)] = -(dcol[i] - b.dot(&proj));
                }
            }
            Some(jac)
        } else {
            None
        };
        Ok(Evaluation {
            coef,
            residual,
            cost,
            jac,
        })
    }

    /// Weighted power of the oscillating part relative to the residual
    /// variance per sample.
    fn signal_to_noise(&self, theta: &Vector2<f64>, coef: &Vector3<f64>, cost: f64) -> f64 {
        let n = self.t.len();
        let mut power = 0.0;
        for i in 0..n {
            let (f, _) = self.basis(theta, self.t[i]);
            let s = self.sw[i] * (f[0] * coef[0] + f[1] * coef[1]);
            power += s * s;
        }
        let sigma2 = cost / (n as f64 - 5.0).max(1.0);
        if sigma2 <= 0.0 {
            f64::INFINITY
        } else {
            power / (2.0 * sigma2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn synthetic(
        omega: f64,
        t2: f64,
        a: f64,
        b: f64,
        c: f64,
        noise: f64,
        seed: u64,
    ) -> MeasurementTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times: Vec<f64> = (0..334).map(|k| 3.0 * k as f64).collect();
        let angles = times
            .iter()
            .map(|&t| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (a * (omega * t).cos() + b * (omega * t).sin()) * (-t / t2).exp() + c + noise * z
            })
            .collect();
        MeasurementTrace::new(times, angles).unwrap()
    }

    fn init() -> FidModelParams {
        FidModelParams {
            g: 1e-7,
            omega_l: 2.0 * std::f64::consts::PI / 38.0,
            t2: 1000.0,
            phi0: 0.0,
        }
    }

    #[test]
    fn noiseless_recovery() {
        let omega = 2.0 * std::f64::consts::PI / 38.3;
        let tr = synthetic(omega, 1700.0, 0.03, -0.11, 2e-3, 0.0, 1);
        for weights in [WeightParams::uniform(), WeightParams::tracking_default()] {
            let fit = fit_global(&tr, 1e-7, 500.0, &weights, &init()).unwrap();
            assert!((fit.params.omega_l - omega).abs() < 1e-6 * omega);
            assert!((fit.params.t2 - 1700.0).abs() < 1e-6 * 1700.0);
            assert!((fit.params.phi0 - 2e-3).abs() < 1e-6 * 2e-3);
            assert!(fit.fit.warnings.is_empty(), "{:?}", fit.fit.warnings);
        }
    }

    #[test]
    fn pure_noise_is_never_silent() {
        for seed in 0..10 {
            let tr = synthetic(0.16, 1000.0, 0.0, 0.0, 0.0, 6e-4, seed);
            match fit_global(&tr, 1e-7, 300.0, &WeightParams::uniform(), &init()) {
                Err(_) => {}
                Ok(f) => assert!(!f.fit.warnings.is_empty(), "silent fit {f:?}"),
            }
        }
    }

    #[test]
    fn weight_function_shape() {
        let w = WeightParams {
            amp: 3.0,
            width: 2.0,
            imbalance_slope: 10.0,
            t2: 100.0,
        };
        assert_eq!(w.weight(50.0, 0.0, 50.0), 4.0);
        let far = w.weight(1e9, 0.0, 0.0);
        assert!((far - 1.0).abs() < 1e-12);
        assert!((w.weight(50.0, -0.1, 50.0) - 2.0).abs() < 1e-12);
        assert_eq!(WeightParams::uniform().weight(7.0, 0.3, 500.0), 1.0);
    }

    #[test]
    fn rejects_short_and_out_of_span() {
        let tr = MeasurementTrace::new((0..10).map(|k| k as f64).collect(), vec![0.0; 10]).unwrap();
        assert!(fit_global(&tr, 1e-7, 5.0, &WeightParams::uniform(), &init()).is_err());
        let tr = synthetic(0.16, 1000.0, 0.1, 0.0, 0.0, 0.0, 1);
        assert!(fit_global(&tr, 1e-7, 5000.0, &WeightParams::uniform(), &init()).is_err());
    }
}
