//! Calibration constants: the stroboscopic noise factor α (and β = α/8),
//! the coupling moments μ₁ and μ₂, and their extraction from data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, Execution};

/// Stroboscopic calibration sequence: `n_pulses` pulses spaced by half a
/// Larmor period, each followed by scattering with survival `chi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StroboscopicConfig {
    pub n_pulses: usize,
    /// Photons per pulse `N_L`.
    pub photons: f64,
    /// Survival probability per pulse.
    pub chi: f64,
    pub p_return: f64,
    /// Coupling, rad per unit spin.
    pub g: f64,
    /// Initial atom number.
    pub atoms: f64,
}

impl StroboscopicConfig {
    /// Calibration sequence of 36 pulses of 3.15e7 photons with 1% loss each.
    pub fn reference() -> Self {
        StroboscopicConfig {
            n_pulses: 36,
            photons: 3.15e7,
            chi: 0.99,
            p_return: 0.7,
            g: 7.07e-8,
            atoms: 1.0e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pulses == 0 {
            return Err(Error::Domain("n_pulses must be >= 1".into()));
        }
        if !(self.chi > 0.0 && self.chi <= 1.0) {
            return Err(Error::Domain(format!(
                "chi must lie in (0, 1], got {}",
                self.chi
            )));
        }
        if !(0.0..=1.0).contains(&self.p_return) {
            return Err(Error::Domain(format!(
                "p_return must lie in [0, 1], got {}",
                self.p_return
            )));
        }
        if !(self.atoms > 0.0) || !self.atoms.is_finite() {
            return Err(Error::Domain("atoms must be > 0".into()));
        }
        Ok(())
    }
}

/// Result of [`compute_alpha`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaResult {
    pub beta: f64,
    pub alpha: f64,
    /// Projection-noise contribution `β·g²·N_A·N_L²/2` to `var(Sy)`.
    pub sy_projection_var: f64,
}

/// Propagate the joint covariance of `{Fz, Sy⁽¹⁾ … Sy⁽ᴺ⁾}` through the
/// stroboscopic sequence and extract the projection-noise factor.
///
/// Per pulse `n` the sequence is: scatter (`Fz` damped by `√χ`, noise
/// `(2/3)p(1−χ)·N` added with the current atom number, atoms multiplied by
/// `χ + p − χp`); coupling of `Fz` into `Sy⁽ⁿ⁾` with unit gain; π precession
/// (`Fz → −Fz`); scatter again. The signal is demodulated with the
/// alternating projector `P = (0, +1, −1, …)` and normalised to the
/// undamped value `N²·N_A/2`, giving α; β = α/8. The ordering was fixed
/// once by matching β ≈ 0.1081 at χ = 0.99, p = 0.7, N = 36.
pub fn compute_alpha(cfg: &StroboscopicConfig) -> Result<AlphaResult> {
    cfg.validate()?;
    let n = cfg.n_pulses;
    let d = n + 1;
    let mut gamma = DMatrix::<f64>::zeros(d, d);
    gamma[(0, 0)] = cfg.atoms / 2.0;
    let mut atoms = cfg.atoms;
    let sqrt_chi = cfg.chi.sqrt();
    let p = cfg.p_return;

    let scatter = |gamma: &mut DMatrix<f64>, atoms: &mut f64| {
        for j in 0..d {
            gamma[(0, j)] *= sqrt_chi;
        }
        for i in 0..d {
            gamma[(i, 0)] *= sqrt_chi;
        }
        gamma[(0, 0)] += 2.0 / 3.0 * p * (1.0 - cfg.chi) * *atoms;
        *atoms *= cfg.chi + p - cfg.chi * p;
    };

    for pulse in 0..n {
        scatter(&mut gamma, &mut atoms);
        // Coupling: Sy(pulse) += Fz, i.e. row/column `pulse+1` += row/column 0.
        let row = pulse + 1;
        for j in 0..d {
            let v = gamma[(0, j)];
            gamma[(row, j)] += v;
        }
        for i in 0..d {
            let v = gamma[(i, 0)];
            gamma[(i, row)] += v;
        }
        // π precession flips Fz.
        for j in 0..d {
            gamma[(0, j)] = -gamma[(0, j)];
        }
        for i in 0..d {
            gamma[(i, 0)] = -gamma[(i, 0)];
        }
        scatter(&mut gamma, &mut atoms);

        let min = SymmetricEigen::new(gamma.clone()).eigenvalues.min();
        if min < -1e-9 * gamma.trace().abs() {
            return Err(Error::StateValidity {
                context: format!("alpha propagation, pulse {pulse}"),
                violations: vec![crate::spin_core::Violation::NotPsd {
                    min_eigenvalue: min,
                    tolerance: 1e-9 * gamma.trace().abs(),
                }],
            });
        }
    }

    let proj = DVector::from_fn(d, |i, _| {
        if i == 0 {
            0.0
        } else if (i - 1) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    });
    let var = (proj.transpose() * &gamma * &proj)[0];
    let nf = n as f64;
    let alpha = var / (nf * nf * cfg.atoms / 2.0);
    let beta = alpha / 8.0;
    Ok(AlphaResult {
        beta,
        alpha,
        sy_projection_var: beta * cfg.g * cfg.g * cfg.atoms * cfg.photons * cfg.photons / 2.0,
    })
}

/// Straight-line fit `Φ = a₀ + μ₁·N_A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mu1Fit {
    pub mu1: f64,
    pub a0: f64,
    pub mu1_se: f64,
    pub a0_se: f64,
}

/// Ordinary least squares of rotation angle on atom number.
pub fn fit_mu1(points: &[(f64, f64)]) -> Result<Mu1Fit> {
    if points.len() < 3 {
        return Err(Error::Domain("fit_mu1 needs >= 3 points".into()));
    }
    let coef = polyfit(points, 1)?;
    Ok(Mu1Fit {
        mu1: coef.values[1],
        a0: coef.values[0],
        mu1_se: coef.std_errors[1],
        a0_se: coef.std_errors[0],
    })
}

/// Quadratic fit `var(φ) = a₀ + a₁·N_A + a₂·N_A²` and `μ₂ = 2a₁/α`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mu2Fit {
    pub mu2: f64,
    pub mu2_se: f64,
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a0_se: f64,
    pub a1_se: f64,
    pub a2_se: f64,
    /// Set when `a₁ < 0` (unphysical projection noise); values still reported.
    pub negative_a1: bool,
}

/// Separate electronic (`a₀`), projection (`a₁`) and technical (`a₂`)
/// noise by their atom-number scaling.
pub fn fit_mu2(points: &[(f64, f64)], alpha: f64) -> Result<Mu2Fit> {
    if points.len() < 4 {
        return Err(Error::Domain("fit_mu2 needs >= 4 points".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be > 0, got {alpha}")));
    }
    let c = polyfit(points, 2)?;
    Ok(Mu2Fit {
        mu2: 2.0 * c.values[1] / alpha,
        mu2_se: 2.0 * c.std_errors[1] / alpha,
        a0: c.values[0],
        a1: c.values[1],
        a2: c.values[2],
        a0_se: c.std_errors[0],
        a1_se: c.std_errors[1],
        a2_se: c.std_errors[2],
        negative_a1: c.values[1] < 0.0,
    })
}

struct PolyFit {
    values: Vec<f64>,
    std_errors: Vec<f64>,
}

/// Least-squares polynomial of `degree` via QR on a column-scaled design.
/// The result is invariant to the order of the points up to rounding.
fn polyfit(points: &[(f64, f64)], degree: usize) -> Result<PolyFit> {
    let m = degree + 1;
    let n = points.len();
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Domain("non-finite calibration data".into()));
    }
    let xs = points.iter().fold(0.0f64, |a, p| a.max(p.0.abs()));
    if xs == 0.0 {
        return Err(Error::Rank("all abscissae are zero".into()));
    }
    let design = DMatrix::from_fn(n, m, |i, j| (points[i].0 / xs).powi(j as i32));
    let y = DVector::from_fn(n, |i, _| points[i].1);
    let qr = design.clone().qr();
    let r = qr.r();
    let diag_min = (0..m)
        .map(|i| r[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    let diag_max = (0..m).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if !(diag_min > 1e-12 * diag_max) {
        return Err(Error::Rank(format!(
            "degree-{degree} design is rank deficient (abscissae not distinct enough)"
        )));
    }
    let qty = qr.q().transpose() * &y;
    let scaled = r
        .solve_upper_triangular(&qty.rows(0, m).into_owned())
        .ok_or_else(|| Error::Rank("triangular solve failed".into()))?;
    let resid = &y - &design * &scaled;
    let dof = n.saturating_sub(m).max(1) as f64;
    let sigma2 = resid.norm_squared() / dof;
    let rinv = r
        .try_inverse()
        .ok_or_else(|| Error::Rank("singular R factor".into()))?;
    let cov = &rinv * rinv.transpose() * sigma2;
    let values = (0..m).map(|j| scaled[j] / xs.powi(j as i32)).collect();
    let std_errors = (0..m)
        .map(|j| cov[(j, j)].max(0.0).sqrt() / xs.powi(j as i32))
        .collect();
    Ok(PolyFit { values, std_errors })
}

/// Spatial distribution of the atoms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AtomDensity {
    /// All atoms on the beam axis at the focus.
    Point,
    /// Lorentzian along the beam (FWHM, μm) times an isotropic Gaussian in
    /// the transverse plane (per-axis σ, μm).
    LorentzianGaussian { axial_fwhm: f64, radial_sigma: f64 },
}

/// Transverse profile of the probe's coupling strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeBeam {
    /// Same coupling everywhere.
    Uniform { g0: f64 },
    /// Gaussian beam: `g = g_peak·(w₀/w)²·exp(−2r²/w²)`,
    /// `w(z) = w₀·sqrt(1 + (z/z_R)²)`; lengths in μm. An infinite
    /// Rayleigh range gives a collimated beam.
    Gaussian {
        g_peak: f64,
        waist: f64,
        rayleigh_range: f64,
    },
}

impl ProbeBeam {
    /// Coupling of an atom at transverse radius² `r2` and axial offset `z`.
    pub fn coupling(&self, r2: f64, z: f64) -> f64 {
        match *self {
            ProbeBeam::Uniform { g0 } => g0,
            ProbeBeam::Gaussian {
                g_peak,
                waist,
                rayleigh_range,
            } => {
                let q = if rayleigh_range.is_finite() {
                    1.0 + (z / rayleigh_range).powi(2)
                } else {
                    1.0
                };
                let w2 = waist * waist * q;
                g_peak / q * (-2.0 * r2 / w2).exp()
            }
        }
    }
}

/// Monte Carlo coupling moments with standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingMoments {
    /// `μ₁ = ⟨g(x)⟩`.
    pub mu1: f64,
    /// `μ₂ = ⟨g²(x)⟩`.
    pub mu2: f64,
    /// Atom-number-weighted variance factor; equals `μ₂` for Poissonian
    /// loading (in general `v₂ ≥ μ₂`).
    pub v2: f64,
    pub mu1_se: f64,
    pub mu2_se: f64,
    pub samples: usize,
}

/// Sample atom positions and average the coupling and its square.
pub fn coupling_moments(
    density: &AtomDensity,
    beam: &ProbeBeam,
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<CouplingMoments> {
    const CHUNKS: usize = 64;
    if samples < 2 {
        return Err(Error::Domain("coupling_moments needs >= 2 samples".into()));
    }
    match *density {
        AtomDensity::Point => {}
        AtomDensity::LorentzianGaussian {
            axial_fwhm,
            radial_sigma,
        } => {
            if !(axial_fwhm > 0.0 && radial_sigma >= 0.0) {
                return Err(Error::Domain("cloud sizes must be positive".into()));
            }
        }
    }
    if let ProbeBeam::Gaussian {
        g_peak,
        waist,
        rayleigh_range,
    } = *beam
    {
        if !(g_peak.is_finite() && waist > 0.0 && rayleigh_range > 0.0) {
            return Err(Error::Domain("beam parameters must be positive".into()));
        }
    }
    let per_chunk = samples.div_ceil(CHUNKS);
    let chunks = exec.map(CHUNKS, |c| -> Result<[f64; 4]> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
        let start = c * per_chunk;
        let end = ((c + 1) * per_chunk).min(samples);
        let mut acc = [0.0; 4];
        let cauchy = match *density {
            AtomDensity::LorentzianGaussian { axial_fwhm, .. } => Some(
                Cauchy::new(0.0, axial_fwhm / 2.0)
                    .map_err(|e| Error::Domain(format!("axial profile: {e}")))?,
            ),
            AtomDensity::Point => None,
        };
        for _ in start..end {
            let (r2, z) = match *density {
                AtomDensity::Point => (0.0, 0.0),
                AtomDensity::LorentzianGaussian { radial_sigma, .. } => {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    let y: f64 = StandardNormal.sample(&mut rng);
                    let z = cauchy.expect("set above").sample(&mut rng);
                    (radial_sigma * radial_sigma * (x * x + y * y), z)
                }
            };
            let g = beam.coupling(r2, z);
            acc[0] += g;
            acc[1] += g * g;
            acc[2] += g * g * g;
            acc[3] += g * g * g * g;
        }
        Ok(acc)
    });
    let mut s = [0.0; 4];
    for c in chunks {
        let a = c?;
        for k in 0..4 {
            s[k] += a[k];
        }
    }
    let n = samples as f64;
    let mu1 = s[0] / n;
    let mu2 = s[1] / n;
    if !(mu2 > 0.0) {
        return Err(Error::DegenerateGeometry(
            "atomic density and probe beam do not overlap".into(),
        ));
    }
    let var1 = (mu2 - mu1 * mu1).max(0.0) * n / (n - 1.0);
    let var2 = (s[3] / n - mu2 * mu2).max(0.0) * n / (n - 1.0);
    Ok(CouplingMoments {
        mu1,
        mu2,
        v2: mu2,
        mu1_se: (var1 / n).sqrt(),
        mu2_se: (var2 / n).sqrt(),
        samples,
    })
}
