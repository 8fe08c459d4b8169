//! Gaussian-state representation of the collective spin and the per-pulse
//! physics maps: Larmor precession, QND measurement with back-action, and the
//! spontaneous-scattering channel.
//!
//! All maps are pure functions from state to state. Spin components are in
//! units of ħ; the probe light is described by the Stokes component
//! `|⟨Sx⟩| = N_L / 2` of a pulse with `N_L` photons.

use std::fmt;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

/// Gaussian state of the collective spin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpinState {
    /// `(⟨Fx⟩, ⟨Fy⟩, ⟨Fz⟩)` in spin units.
    pub mean: Vector3<f64>,
    /// Symmetric 3×3 covariance in spin² units.
    pub cov: Matrix3<f64>,
    /// Effective atom number (fractional after losses).
    pub atoms: f64,
    /// Time stamp in μs.
    pub time: f64,
}

/// Light-atom coupling of one probe pulse plus its compensation pulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeCoupling {
    /// Rotation angle per unit spin, rad.
    pub g: f64,
    /// Photons per V-polarized measurement pulse (`N_L`).
    pub photons_v: f64,
    /// Photons per H-polarized compensation pulse (`N_L^(H)`).
    pub photons_h: f64,
    /// Scattering probability per photon.
    pub eta: f64,
    /// Fraction of scattered atoms that return to the probed hyperfine level.
    pub p_return: f64,
}

impl ProbeCoupling {
    /// Survival probability `χ = exp(−η·photons)` for a pulse.
    pub fn chi(&self, photons: f64) -> f64 {
        (-self.eta * photons).exp()
    }

    /// `|⟨Sx⟩|` of the measurement pulse.
    pub fn sx(&self) -> f64 {
        self.photons_v / 2.0
    }

    /// `ε = g²|⟨Sx⟩|`, the per-pulse measurement strength in spin⁻² units.
    pub fn strength(&self) -> f64 {
        self.g * self.g * self.sx()
    }

    /// Readout (shot-noise) variance referred to spin units,
    /// `1 / (2 g² |⟨Sx⟩|)`. Infinite when there is no light.
    pub fn readout_var_spin(&self) -> f64 {
        1.0 / (2.0 * self.strength())
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.g,
            self.photons_v,
            self.photons_h,
            self.eta,
            self.p_return,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Domain("probe coupling has non-finite fields".into()));
        }
        if self.photons_v < 0.0 || self.photons_h < 0.0 {
            return Err(Error::Domain("photon numbers must be >= 0".into()));
        }
        if self.eta < 0.0 {
            return Err(Error::Domain("eta must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.p_return) {
            return Err(Error::Domain("p_return must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Preparation of the optically pumped (coherent) spin state along `+y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherentSpinStateSpec {
    /// Mean atom number.
    pub atoms_mean: f64,
    /// Draw the atom number from a Poisson distribution per repetition.
    pub atoms_poisson: bool,
    /// Optical pumping efficiency in `[0, 1]`.
    pub pump_efficiency: f64,
}

/// One violated state invariant together with its magnitude.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Covariance not symmetric; largest asymmetry.
    Asymmetric { max_asymmetry: f64 },
    /// Covariance eigenvalue below `−1e−9·trace`.
    NotPsd { min_eigenvalue: f64, tolerance: f64 },
    /// `var(F_i)·var(F_j) < ⟨F_k⟩²/4 − ε` for the cyclic triple `(i, j, k)`.
    Robertson {
        axis: usize,
        product: f64,
        bound: f64,
        tolerance: f64,
    },
    /// Mean spin length exceeds the atom number.
    SpinLength { length: f64, atoms: f64 },
    /// Non-finite entries.
    NonFinite,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const AXES: [&str; 3] = ["x", "y", "z"];
        match self {
            Violation::Asymmetric { max_asymmetry } => {
                write!(f, "covariance asymmetric by {max_asymmetry:.3e}")
            }
            Violation::NotPsd {
                min_eigenvalue,
                tolerance,
            } => write!(
                f,
                "covariance not PSD: min eigenvalue {min_eigenvalue:.6e} < -{tolerance:.3e}"
            ),
            Violation::Robertson {
                axis,
                product,
                bound,
                tolerance,
            } => write!(
                f,
                "Robertson bound for <F{}> violated: variance product {product:.6e} < {bound:.6e} (tolerance {tolerance:.3e})",
                AXES[*axis]
            ),
            Violation::SpinLength { length, atoms } => {
                write!(f, "spin length {length:.6e} exceeds atom number {atoms:.6e}")
            }
            Violation::NonFinite => write!(f, "state has non-finite entries"),
        }
    }
}

/// Rotation about `x` by `angle`, with the sign convention
/// `Fz' = Fz cos θ − Fy sin θ`, `Fy' = Fy cos θ + Fz sin θ`.
pub fn rotation_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}

/// Build the pumped state for a drawn atom number.
///
/// Mean `(0, η_p·N, 0)`, covariance `diag(N/2, (1−η_p)·N, N/2)`; the
/// residual `Fy` variance is linear in the pumping imperfection.
pub fn make_css(spec: &CoherentSpinStateSpec, atoms_draw: f64) -> Result<GaussianSpinState> {
    if !(atoms_draw >= 0.0) || !atoms_draw.is_finite() {
        return Err(Error::Domain(format!(
            "atom number must be finite and >= 0, got {atoms_draw}"
        )));
    }
    if !(0.0..=1.0).contains(&spec.pump_efficiency) {
        return Err(Error::Domain(format!(
            "pump efficiency must lie in [0, 1], got {}",
            spec.pump_efficiency
        )));
    }
    let n = atoms_draw;
    Ok(GaussianSpinState {
        mean: Vector3::new(0.0, spec.pump_efficiency * n, 0.0),
        cov: Matrix3::from_diagonal(&Vector3::new(
            n / 2.0,
            (1.0 - spec.pump_efficiency) * n,
            n / 2.0,
        )),
        atoms: n,
        time: 0.0,
    })
}

/// Larmor precession by `angle` about the field axis `x`.
pub fn precess(state: &GaussianSpinState, angle: f64) -> GaussianSpinState {
    let r = rotation_x(angle);
    GaussianSpinState {
        mean: r * state.mean,
        cov: symmetrize(&(r * state.cov * r.transpose())),
        ..*state
    }
}

/// Result of the ensemble-averaged QND measurement map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QndUpdate {
    pub state: GaussianSpinState,
    /// Readout variance referred to spin units, `1/(2g²|⟨Sx⟩|)`.
    pub readout_var_spin: f64,
}

/// Conditional covariance after a QND measurement of `Fz`, before the
/// measurement outcome is known.
///
/// The full `z` row/column is updated with the Gaussian conditioning rule,
/// so `var(Fz)' = var/(1 + 2g²|⟨Sx⟩|var)` and `cov(Fy,Fz)` shrinks by the
/// same factor. The mean is unchanged until an outcome is supplied; see
/// [`condition_on_outcome`].
pub fn measurement_conditioning(cov: &Matrix3<f64>, readout_var_spin: f64) -> Matrix3<f64> {
    if !readout_var_spin.is_finite() {
        return *cov;
    }
    let col = cov.column(2).into_owned();
    let s = cov[(2, 2)] + readout_var_spin;
    if s <= 0.0 {
        return *cov;
    }
    let gain = col / s;
    symmetrize(&(cov - gain * col.transpose()))
}

/// Exact moments of a random rotation about `z` by `θ ~ Normal(0, v)`.
///
/// The probe's `Sz` fluctuations rotate `(Fx, Fy)` by `θ = g·Sz` with
/// `var(θ) = g²|⟨Sx⟩|/2`. For Gaussian `θ` independent of the spin the
/// transformed first and second moments are exact:
/// `⟨cos θ⟩ = e^{−v/2}`, `⟨cos² θ⟩ = (1+e^{−2v})/2`, `⟨sin² θ⟩ = (1−e^{−2v})/2`.
pub fn back_action(state: &GaussianSpinState, theta_var: f64) -> GaussianSpinState {
    if theta_var <= 0.0 {
        return *state;
    }
    let c1 = (-theta_var / 2.0).exp();
    let e2 = (-2.0 * theta_var).exp();
    let c2 = (1.0 + e2) / 2.0;
    let s2 = (1.0 - e2) / 2.0;
    let m = state.mean;
    let q = state.cov + m * m.transpose();
    let mut qn = Matrix3::zeros();
    qn[(0, 0)] = c2 * q[(0, 0)] + s2 * q[(1, 1)];
    qn[(1, 1)] = c2 * q[(1, 1)] + s2 * q[(0, 0)];
    qn[(0, 1)] = (c2 - s2) * q[(0, 1)];
    qn[(0, 2)] = c1 * q[(0, 2)];
    qn[(1, 2)] = c1 * q[(1, 2)];
    qn[(2, 2)] = q[(2, 2)];
    qn[(1, 0)] = qn[(0, 1)];
    qn[(2, 0)] = qn[(0, 2)];
    qn[(2, 1)] = qn[(1, 2)];
    let mn = Vector3::new(c1 * m[0], c1 * m[1], m[2]);
    GaussianSpinState {
        mean: mn,
        cov: symmetrize(&(qn - mn * mn.transpose())),
        ..*state
    }
}

/// Ensemble-averaged QND measurement of `Fz` by one V pulse: conditioning
/// of the covariance followed by probe back-action on `(Fx, Fy)`.
///
/// With no light the state is returned unchanged.
pub fn qnd_update(state: &GaussianSpinState, coupling: &ProbeCoupling) -> Result<QndUpdate> {
    let eps = coupling.strength();
    let readout_var_spin = coupling.readout_var_spin();
    if eps <= 0.0 {
        return Ok(QndUpdate {
            state: *state,
            readout_var_spin,
        });
    }
    let conditioned = GaussianSpinState {
        cov: measurement_conditioning(&state.cov, readout_var_spin),
        ..*state
    };
    let out = back_action(&conditioned, eps / 2.0);
    ensure_psd(&out, "qnd_update")?;
    Ok(QndUpdate {
        state: out,
        readout_var_spin,
    })
}

/// Condition the mean and covariance on the measured spin-unit outcome
/// `y = (φ − φ₀)/g` with readout variance `readout_var_spin`.
pub fn condition_on_outcome(
    state: &GaussianSpinState,
    y: f64,
    readout_var_spin: f64,
) -> GaussianSpinState {
    if !readout_var_spin.is_finite() {
        return *state;
    }
    let col = state.cov.column(2).into_owned();
    let s = state.cov[(2, 2)] + readout_var_spin;
    if s <= 0.0 {
        return *state;
    }
    let gain = col / s;
    GaussianSpinState {
        mean: state.mean + gain * (y - state.mean[2]),
        cov: symmetrize(&(state.cov - gain * col.transpose())),
        ..*state
    }
}

/// Spontaneous-scattering channel for a pulse of `photons` photons.
///
/// With `χ = exp(−η·photons)`: `cov → χ·cov + (2/3)p(1−χ)·N·I`,
/// `N → (χ + p − χp)·N` and `mean → χ·mean` (returning atoms are
/// unpolarized).
pub fn scatter_channel(
    state: &GaussianSpinState,
    coupling: &ProbeCoupling,
    photons: f64,
) -> GaussianSpinState {
    let chi = coupling.chi(photons);
    if chi >= 1.0 {
        return *state;
    }
    let p = coupling.p_return;
    let added = 2.0 / 3.0 * p * (1.0 - chi) * state.atoms;
    GaussianSpinState {
        mean: state.mean * chi,
        cov: state.cov * chi + Matrix3::identity() * added,
        atoms: (chi + p - chi * p) * state.atoms,
        time: state.time,
    }
}

/// List every violated invariant of `state`; empty when valid.
pub fn check_state(state: &GaussianSpinState) -> Vec<Violation> {
    let mut out = Vec::new();
    let finite = state.mean.iter().all(|x| x.is_finite())
        && state.cov.iter().all(|x| x.is_finite())
        && state.atoms.is_finite();
    if !finite {
        out.push(Violation::NonFinite);
        return out;
    }
    let cov = &state.cov;
    let scale = cov.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
    let asym = (cov - cov.transpose()).amax();
    if asym > 1e-12 * scale {
        out.push(Violation::Asymmetric {
            max_asymmetry: asym,
        });
    }
    let tolerance = 1e-9 * cov.trace().abs();
    let min_eig = SymmetricEigen::new(symmetrize(cov)).eigenvalues.min();
    if min_eig < -tolerance {
        out.push(Violation::NotPsd {
            min_eigenvalue: min_eig,
            tolerance,
        });
    }
    let rob_tol = 1e-6 * (state.atoms / 2.0).powi(2);
    for axis in 0..3 {
        let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
        let product = cov[(i, i)] * cov[(j, j)];
        let bound = state.mean[axis].powi(2) / 4.0;
        if product < bound - rob_tol {
            out.push(Violation::Robertson {
                axis,
                product,
                bound,
                tolerance: rob_tol,
            });
        }
    }
    let length = state.mean.norm();
    if length > state.atoms * (1.0 + 1e-12) {
        out.push(Violation::SpinLength {
            length,
            atoms: state.atoms,
        });
    }
    out
}

fn ensure_psd(state: &GaussianSpinState, context: &str) -> Result<()> {
    let violations: Vec<_> = check_state(state)
        .into_iter()
        .filter(|v| matches!(v, Violation::NotPsd { .. } | Violation::NonFinite))
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::StateValidity {
            context: context.to_string(),
            violations,
        })
    }
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn css(n: f64, eff: f64) -> GaussianSpinState {
        make_css(
            &CoherentSpinStateSpec {
                atoms_mean: n,
                atoms_poisson: false,
                pump_efficiency: eff,
            },
            n,
        )
        .unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn css_perfect_pumping_two_atoms() {
        let s = css(2.0, 1.0);
        assert_eq!(s.mean, Vector3::new(0.0, 2.0, 0.0));
        assert_eq!(s.cov, Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 1.0)));
    }

    #[test]
    fn css_partial_pumping() {
        let s = css(1.88e6, 0.98);
        assert!(rel(s.mean[1], 1.8424e6) < 1e-12);
        assert!(check_state(&s).is_empty());
    }

    #[test]
    fn css_empty_and_negative() {
        let s = css(0.0, 1.0);
        assert_eq!(s.mean, Vector3::zeros());
        assert_eq!(s.cov, Matrix3::zeros());
        let spec = CoherentSpinStateSpec {
            atoms_mean: 1.0,
            atoms_poisson: false,
            pump_efficiency: 1.0,
        };
        assert!(matches!(make_css(&spec, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn precess_full_period_and_quarter() {
        let mut s = css(1e6, 0.98);
        s.cov[(1, 2)] = 1234.0;
        s.cov[(2, 1)] = 1234.0;
        let full = precess(&s, 2.0 * PI);
        assert!((full.mean - s.mean).amax() < 1e-12 * s.mean.norm());
        assert!((full.cov - s.cov).amax() < 1e-12 * s.cov.amax());

        let f = 7.0;
        let mut t = s;
        t.mean = Vector3::new(0.0, f, 0.0);
        let q = precess(&t, PI / 2.0);
        assert!((q.mean - Vector3::new(0.0, 0.0, -f)).amax() < 1e-12 * f);
    }

    #[test]
    fn larmor_angle_per_pulse_interval() {
        // 37.6 mG at 0.6998 MHz/G gives a period close to 38 us.
        let period_us: f64 = 1.0 / (37.6e-3 * 0.6998);
        assert!((period_us - 38.0).abs() < 0.1);
        let angle = 2.0 * PI / 38.0 * 3.0;
        assert!((angle - 0.496).abs() < 1e-3);
    }

    #[test]
    fn precess_preserves_length_and_trace() {
        let s = css(1e6, 0.9);
        let r = precess(&s, 0.7318);
        assert!(rel(r.mean.norm(), s.mean.norm()) < 1e-12);
        assert!(rel(r.cov.trace(), s.cov.trace()) < 1e-12);
        let two = precess(&precess(&s, 0.3), 1.1);
        let one = precess(&s, 1.4);
        assert!((two.mean - one.mean).amax() < 1e-12 * s.mean.norm());
        assert!((two.cov - one.cov).amax() < 1e-12 * s.cov.amax());
    }

    fn coupling_with_strength(eps: f64) -> ProbeCoupling {
        // g = 1, |Sx| = eps.
        ProbeCoupling {
            g: 1.0,
            photons_v: 2.0 * eps,
            photons_h: 0.0,
            eta: 0.0,
            p_return: 0.0,
        }
    }

    #[test]
    fn pooled_update_halves_css_variance() {
        let n = 1e6;
        let s = css(n, 1.0);
        let c = coupling_with_strength(1.0 / n);
        let u = qnd_update(&s, &c).unwrap();
        assert!(rel(u.state.cov[(2, 2)], n / 4.0) < 1e-12);
        assert!(rel(u.readout_var_spin, n / 2.0) < 1e-12);
    }

    #[test]
    fn no_light_is_identity() {
        let s = css(1e6, 0.98);
        let c = coupling_with_strength(0.0);
        assert_eq!(qnd_update(&s, &c).unwrap().state, s);
    }

    #[test]
    fn back_action_raises_fx_variance_by_about_n() {
        let n = 1e6;
        let s = css(n, 1.0);
        let c = coupling_with_strength(1.0 / n);
        let u = qnd_update(&s, &c).unwrap();
        let dvx = u.state.cov[(0, 0)] - s.cov[(0, 0)];
        // Same order as the initial N/2.
        assert!(dvx > 0.3 * n && dvx < 0.6 * n, "dvx = {dvx}");
    }

    #[test]
    fn back_action_first_order_coefficients() {
        let s = GaussianSpinState {
            mean: Vector3::new(0.0, 30.0, 0.0),
            cov: Matrix3::from_diagonal(&Vector3::new(400.0, 30.0, 500.0)),
            atoms: 2e3,
            time: 0.0,
        };
        let eps = 1e-6;
        let r = back_action(&s, eps / 2.0);
        let fy2 = s.cov[(1, 1)] + s.mean[1].powi(2);
        let d_fy = r.mean[1] - s.mean[1];
        let d_vx = r.cov[(0, 0)] - s.cov[(0, 0)];
        let d_vy = r.cov[(1, 1)] - s.cov[(1, 1)];
        assert!(rel(d_fy, -0.25 * eps * s.mean[1]) < 1e-5);
        assert!(rel(d_vx, eps * (-0.5 * s.cov[(0, 0)] + 0.5 * fy2)) < 1e-5);
        assert!(rel(d_vy, eps * (-0.5 * s.cov[(1, 1)] + 0.5 * s.cov[(0, 0)])) < 1e-5);
        assert_eq!(r.cov[(2, 2)], s.cov[(2, 2)]);
        assert_eq!(r.cov[(0, 1)], 0.0);
        assert_eq!(r.cov[(0, 2)], 0.0);
    }

    #[test]
    fn conditioning_scales_yz_covariance() {
        let mut s = css(1e6, 0.98);
        s = precess(&s, 0.4);
        let r = 2e5;
        let cov = measurement_conditioning(&s.cov, r);
        let k = r / (s.cov[(2, 2)] + r);
        assert!(rel(cov[(1, 2)], k * s.cov[(1, 2)]) < 1e-12);
        assert!(rel(cov[(2, 2)], k * s.cov[(2, 2)]) < 1e-12);
    }

    #[test]
    fn scatter_examples() {
        let s = css(1e6, 0.98);
        let none = ProbeCoupling {
            g: 1.0,
            photons_v: 1.0,
            photons_h: 0.0,
            eta: 0.0,
            p_return: 0.7,
        };
        assert_eq!(scatter_channel(&s, &none, 1e6), s);

        let eta = -(0.99f64).ln();
        let c = ProbeCoupling { eta, ..none };
        let r = scatter_channel(&s, &c, 1.0);
        assert!(rel(r.atoms, 0.997e6) < 1e-12);

        let zero = GaussianSpinState {
            cov: Matrix3::zeros(),
            ..s
        };
        let r = scatter_channel(&zero, &c, 1.0);
        let expect = 2.0 / 3.0 * 0.7 * 0.01 * 1e6;
        assert!(rel(r.cov[(0, 0)], 4.667e3) < 1e-3);
        for i in 0..3 {
            assert!(rel(r.cov[(i, i)], expect) < 1e-9);
        }
    }

    #[test]
    fn check_state_reports() {
        assert!(check_state(&css(1e6, 0.98)).is_empty());
        let mut s = css(1e6, 0.98);
        s.cov[(0, 0)] = -1.0 - 1e6;
        s.cov[(1, 1)] = 0.0;
        s.cov[(2, 2)] = 0.0;
        s.mean = Vector3::zeros();
        assert!(check_state(&s)
            .iter()
            .any(|v| matches!(v, Violation::NotPsd { .. })));

        let r = GaussianSpinState {
            mean: Vector3::new(1.0, 0.0, 0.0),
            cov: Matrix3::zeros(),
            atoms: 1.0,
            time: 0.0,
        };
        assert!(check_state(&r)
            .iter()
            .any(|v| matches!(v, Violation::Robertson { axis: 0, .. })));
    }
}
