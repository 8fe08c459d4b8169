//! Seeded Monte Carlo generation of Faraday-rotation records.
//!
//! One [`MeasurementTrace`] corresponds to one experimental repetition: the
//! atoms are pumped into a coherent spin state, precess freely for a fixed
//! delay, and are then probed by a train of QND pulses. Each pulse yields a
//! Gaussian outcome drawn from the current state; the state is conditioned
//! on it, suffers back-action and scattering from the V and H pulses, and
//! dephases between pulses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, Execution};
use crate::spin_core::{
    back_action, check_state, condition_on_outcome, make_css, measurement_conditioning, precess,
    scatter_channel, CoherentSpinStateSpec, ProbeCoupling, Violation,
};

/// Everything that defines one simulated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseTrainConfig {
    pub coupling: ProbeCoupling,
    /// Pulse spacing, μs.
    pub pulse_interval: f64,
    /// Number of measurement pulses.
    pub pulse_count: usize,
    /// Nominal Larmor angular frequency, rad/μs.
    pub larmor_omega: f64,
    /// Gradient-dephasing time of the mean spin, μs.
    pub t2_gradient: f64,
    /// Per-trace RMS deviation of the Larmor frequency, rad/μs.
    pub omega_jitter_rms: f64,
    /// Polarimeter baseline offset, rad.
    pub phi0_offset: f64,
    /// Per-trace RMS baseline deviation, rad.
    pub phi0_drift_rms: f64,
    /// Free precession between pumping and the first pulse, μs.
    pub pump_delay: f64,
    /// Multiplier on the shot-noise readout variance `1/N_L` (detection
    /// inefficiency); `0` disables shot noise.
    pub readout_var_multiplier: f64,
    /// Sample measurement outcomes and apply the measurement maps. When
    /// false the record is the noiseless mean signal and the state evolves
    /// only under precession, scattering and dephasing.
    pub quantum_noise: bool,
    pub css: CoherentSpinStateSpec,
    /// Master seed.
    pub seed: u64,
}

impl PulseTrainConfig {
    /// Parameters of the desk-scale reproduction of the tracking experiment.
    pub fn reference() -> Self {
        PulseTrainConfig {
            coupling: ProbeCoupling {
                g: 1.0e-7,
                photons_v: 2.74e6,
                photons_h: 1.49e6,
                eta: 3.0e-10,
                p_return: 0.7,
            },
            pulse_interval: 3.0,
            pulse_count: 334,
            larmor_omega: 2.0 * std::f64::consts::PI / 38.0,
            t2_gradient: 5000.0,
            omega_jitter_rms: 1.7e-5,
            phi0_offset: 0.0,
            phi0_drift_rms: 0.0,
            pump_delay: 58.0,
            readout_var_multiplier: 1.0,
            quantum_noise: true,
            css: CoherentSpinStateSpec {
                atoms_mean: 1.88e6,
                atoms_poisson: true,
                pump_efficiency: 0.98,
            },
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coupling.validate()?;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Domain(format!(
                    "{name} must be finite and > 0, got {v}"
                )))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Domain(format!(
                    "{name} must be finite and >= 0, got {v}"
                )))
            }
        };
        positive("pulse_interval", self.pulse_interval)?;
        positive("t2_gradient", self.t2_gradient)?;
        if self.pulse_count == 0 {
            return Err(Error::Domain("pulse_count must be >= 1".into()));
        }
        if !self.larmor_omega.is_finite() {
            return Err(Error::Domain("larmor_omega must be finite".into()));
        }
        non_negative("omega_jitter_rms", self.omega_jitter_rms)?;
        non_negative("phi0_drift_rms", self.phi0_drift_rms)?;
        non_negative("pump_delay", self.pump_delay)?;
        non_negative("readout_var_multiplier", self.readout_var_multiplier)?;
        non_negative("atoms_mean", self.css.atoms_mean)?;
        if !self.phi0_offset.is_finite() {
            return Err(Error::Domain("phi0_offset must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.css.pump_efficiency) {
            return Err(Error::Domain("pump_efficiency must lie in [0, 1]".into()));
        }
        if self.quantum_noise && self.coupling.g <= 0.0 {
            return Err(Error::Domain("g must be > 0".into()));
        }
        Ok(())
    }

    /// Pulse times `t_k = k·Δt`, μs.
    pub fn times(&self) -> Vec<f64> {
        (0..self.pulse_count)
            .map(|k| k as f64 * self.pulse_interval)
            .collect()
    }

    /// Shot-noise readout variance of one outcome in rad².
    pub fn readout_var_rad(&self) -> f64 {
        if self.coupling.photons_v > 0.0 {
            self.readout_var_multiplier / self.coupling.photons_v
        } else {
            f64::INFINITY
        }
    }

    /// Expected atom number at pulse `k` (mean of the loss recursion).
    pub fn expected_atoms(&self, k: usize) -> f64 {
        let c = &self.coupling;
        let p = c.p_return;
        let per_pulse = [c.photons_v, c.photons_h]
            .iter()
            .map(|&n| {
                let chi = c.chi(n);
                chi + p - chi * p
            })
            .product::<f64>();
        self.css.atoms_mean * per_pulse.powi(k as i32)
    }
}

/// Generative record kept alongside a trace for oracle tests and benchmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTruth {
    /// Mean `⟨Fy⟩` of the conditional state just before pulse `k`.
    pub fy: Vec<f64>,
    /// Mean `⟨Fz⟩` of the conditional state just before pulse `k`.
    pub fz: Vec<f64>,
    /// Surviving atom number at pulse `k`.
    pub atoms: Vec<f64>,
    /// Atom number drawn at preparation.
    pub atoms_drawn: f64,
    /// Larmor frequency of this repetition, rad/μs.
    pub omega: f64,
    /// Polarimeter baseline of this repetition, rad.
    pub phi0: f64,
    /// Spin-length violations tolerated during the run (Gaussian tails).
    pub spin_length_warnings: usize,
}

/// Ordered `(t, φ)` samples of one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementTrace {
    pub times: Vec<f64>,
    pub angles: Vec<f64>,
    pub truth: Option<TraceTruth>,
}

impl MeasurementTrace {
    /// Build a trace from raw samples, checking ordering and finiteness.
    pub fn new(times: Vec<f64>, angles: Vec<f64>) -> Result<Self> {
        if times.len() != angles.len() {
            return Err(Error::Domain(format!(
                "times ({}) and angles ({}) differ in length",
                times.len(),
                angles.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("times must be strictly increasing".into()));
        }
        if times.iter().chain(&angles).any(|x| !x.is_finite()) {
            return Err(Error::Domain("trace contains non-finite samples".into()));
        }
        Ok(MeasurementTrace {
            times,
            angles,
            truth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Simulate one repetition from the config's master seed directly.
pub fn simulate_trace(config: &PulseTrainConfig) -> Result<MeasurementTrace> {
    config.validate()?;
    run_trace(config, config.seed)
}

/// Simulate `repetitions` traces; trace `i` uses seed
/// [`derive_seed`]`(config.seed, i)`, so content is independent of the
/// execution order.
pub fn simulate_ensemble(
    config: &PulseTrainConfig,
    repetitions: usize,
    exec: Execution,
) -> Result<Vec<MeasurementTrace>> {
    config.validate()?;
    if repetitions == 0 {
        return Err(Error::Domain("repetitions must be >= 1".into()));
    }
    exec.map(repetitions, |i| {
        run_trace(config, derive_seed(config.seed, i as u64)).map_err(|e| Error::Trace {
            index: i,
            source: Box::new(e),
        })
    })
    .into_iter()
    .collect()
}

fn run_trace(config: &PulseTrainConfig, seed: u64) -> Result<MeasurementTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let css = &config.css;
    let atoms_drawn = if css.atoms_poisson && css.atoms_mean > 0.0 {
        Poisson::new(css.atoms_mean)
            .map_err(|e| Error::Domain(format!("atom-number distribution: {e}")))?
            .sample(&mut rng)
    } else {
        css.atoms_mean
    };
    let omega = config.larmor_omega + config.omega_jitter_rms * normal(&mut rng);
    let phi0 = config.phi0_offset + config.phi0_drift_rms * normal(&mut rng);

    let coupling = &config.coupling;
    let g = coupling.g;
    let readout_rad = config.readout_var_rad();
    let readout_spin = readout_rad / (g * g);
    let theta_var = coupling.strength() / 2.0;
    let dt = config.pulse_interval;
    let decay = (-dt / config.t2_gradient).exp();

    let mut state = make_css(css, atoms_drawn)?;
    state = precess(&state, omega * config.pump_delay);
    state.mean *= (-config.pump_delay / config.t2_gradient).exp();

    let n = config.pulse_count;
    let times = config.times();
    let mut angles = Vec::with_capacity(n);
    let mut fy = Vec::with_capacity(n);
    let mut fz = Vec::with_capacity(n);
    let mut atoms = Vec::with_capacity(n);
    let mut spin_length_warnings = 0;

    for (k, &t) in times.iter().enumerate() {
        if k > 0 {
            state = precess(&state, omega * dt);
        }
        state.time = t;
        fy.push(state.mean[1]);
        fz.push(state.mean[2]);
        atoms.push(state.atoms);

        if config.quantum_noise && coupling.photons_v > 0.0 {
            let sd = (state.cov[(2, 2)] + readout_spin).max(0.0).sqrt();
            let y = state.mean[2] + sd * normal(&mut rng);
            angles.push(g * y + phi0);
            state = if readout_spin > 0.0 {
                condition_on_outcome(&state, y, readout_spin)
            } else {
                // A noiseless readout projects Fz onto the outcome.
                let mut s = state;
                s.cov = measurement_conditioning(&s.cov, 0.0);
                s.mean[2] = y;
                s
            };
            state = back_action(&state, theta_var);
        } else {
            angles.push(g * state.mean[2] + phi0);
        }

        state = scatter_channel(&state, coupling, coupling.photons_v);
        state = scatter_channel(&state, coupling, coupling.photons_h);
        state.mean *= decay;

        for v in check_state(&state) {
            match v {
                Violation::SpinLength { .. } => spin_length_warnings += 1,
                other => {
                    return Err(Error::StateValidity {
                        context: format!("pulse {k} at t = {t} us"),
                        violations: vec![other],
                    })
                }
            }
        }
    }

    Ok(MeasurementTrace {
        times,
        angles,
        truth: Some(TraceTruth {
            fy,
            fz,
            atoms,
            atoms_drawn,
            omega,
            phi0,
            spin_length_warnings,
        }),
    })
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Outcome of one polarimeter reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarimeterSample {
    pub phi_hat: f64,
    /// The noisy ratio `Sy'/Sx` left `[−1, 1]` and was clamped.
    pub clamped: bool,
}

/// Simulate the balanced polarimeter for a rotation `phi_true` with
/// `photons` photons and invert it with `arcsin`.
///
/// `Sy' = Sx·sin φ + noise`, `noise ~ Normal(0, Sx/2)`, `Sx = photons/2`.
/// The standard normal deviate is supplied by the caller so that paired
/// (antithetic) sampling is possible.
pub fn polarimeter_from_normal(phi_true: f64, photons: f64, z: f64) -> Result<PolarimeterSample> {
    if !(phi_true.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(Error::Domain(format!(
            "|phi| must be < pi/2, got {phi_true}"
        )));
    }
    if photons.is_infinite() {
        return Ok(PolarimeterSample {
            phi_hat: phi_true,
            clamped: false,
        });
    }
    if !(photons > 0.0) {
        return Err(Error::Domain("photon number must be > 0".into()));
    }
    let sx = photons / 2.0;
    let sy = sx * phi_true.sin() + (sx / 2.0).sqrt() * z;
    let ratio = sy / sx;
    let clamped = ratio.abs() > 1.0;
    Ok(PolarimeterSample {
        phi_hat: ratio.clamp(-1.0, 1.0).asin(),
        clamped,
    })
}

/// Polarimeter round trip with a fresh normal deviate from `rng`.
/// `photons = ∞` disables shot noise.
pub fn polarimeter_roundtrip<R: Rng>(
    phi_true: f64,
    photons: f64,
    rng: &mut R,
) -> Result<PolarimeterSample> {
    let z = if photons.is_infinite() {
        0.0
    } else {
        normal(rng)
    };
    polarimeter_from_normal(phi_true, photons, z)
}

/// Mean reconstruction bias `E[φ̂] − φ` over `samples` draws, using
/// antithetic pairs `(z, −z)` so that the odd-order noise terms cancel
/// exactly and only the distortion survives. Returns `(bias, stderr,
/// clamped count)`.
pub fn polarimeter_bias(
    phi_true: f64,
    photons: f64,
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<(f64, f64, usize)> {
    const CHUNKS: usize = 64;
    let pairs = (samples / 2).max(1);
    let per_chunk = pairs.div_ceil(CHUNKS);
    let chunks = exec.map(CHUNKS, |c| -> Result<(f64, f64, usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
        let start = c * per_chunk;
        let end = ((c + 1) * per_chunk).min(pairs);
        let (mut s, mut s2, mut clamped) = (0.0, 0.0, 0usize);
        for _ in start..end {
            let z = normal(&mut rng);
            let a = polarimeter_from_normal(phi_true, photons, z)?;
            let b = polarimeter_from_normal(phi_true, photons, -z)?;
            let d = 0.5 * (a.phi_hat + b.phi_hat) - phi_true;
            s += d;
            s2 += d * d;
            clamped += a.clamped as usize + b.clamped as usize;
        }
        Ok((s, s2, clamped, end.saturating_sub(start)))
    });
    let (mut s, mut s2, mut clamped, mut n) = (0.0, 0.0, 0usize, 0usize);
    for c in chunks {
        let (a, b, k, m) = c?;
        s += a;
        s2 += b;
        clamped += k;
        n += m;
    }
    let nf = n as f64;
    let mean = s / nf;
    let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
    Ok((mean, (var / nf).sqrt(), clamped))
}
