//! Flat run configuration read from a TOML file.
//!
//! Every key is a scalar or a flat list. Unknown keys are rejected and a
//! missing required key is reported by name. Units: μs for times, rad for
//! angles, rad/μs for angular frequencies, plain counts for atoms and
//! photons.

use std::path::Path;

use qnd_core::estimator::{FidModelParams, TrackingSetup, WeightParams};
use qnd_core::spin_core::{CoherentSpinStateSpec, ProbeCoupling};
use qnd_core::trajectory_sim::PulseTrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Use `weight_*` as given.
    Fixed,
    /// Start from `weight_*` and minimise the tracking objective first.
    Optimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMode {
    /// Spin length and atom number from the simulation truth sidecars.
    Truth,
    /// Spin length from the predictive estimates, atom number from the
    /// nominal loss curve of the configured pulse train.
    Fitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    /// `traces/trace_NNNN.csv` with header `t_us,phi_rad`.
    PerTrace,
    /// `traces/traces.csv` with header `trace_id,t_us,phi_rad`.
    Long,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // Required.
    pub g: f64,
    pub atoms_mean: f64,
    pub photons_v: f64,
    pub photons_h: f64,
    pub eta: f64,
    pub p_return: f64,
    pub pulse_interval_us: f64,
    pub pulse_count: usize,
    pub larmor_period_us: f64,
    pub repetitions: usize,

    // Simulation.
    #[serde(default = "yes")]
    pub atoms_poisson: bool,
    #[serde(default = "d_pump_efficiency")]
    pub pump_efficiency: f64,
    #[serde(default = "d_t2_gradient")]
    pub t2_gradient_us: f64,
    #[serde(default = "d_omega_jitter")]
    pub omega_jitter_rms: f64,
    #[serde(default)]
    pub phi0_offset_rad: f64,
    #[serde(default)]
    pub phi0_drift_rms_rad: f64,
    #[serde(default = "d_pump_delay")]
    pub pump_delay_us: f64,
    #[serde(default = "d_one")]
    pub readout_var_multiplier: f64,
    #[serde(default = "yes")]
    pub quantum_noise: bool,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "d_trace_format")]
    pub trace_format: TraceFormat,

    // Analysis.
    #[serde(default = "d_delta_t")]
    pub delta_t_us: f64,
    #[serde(default = "d_t_e_start")]
    pub t_e_start_us: f64,
    #[serde(default = "d_t_e_step")]
    pub t_e_step_us: f64,
    #[serde(default = "d_t_e_stop")]
    pub t_e_stop_us: f64,
    #[serde(default = "d_steady")]
    pub steady_state_from_us: f64,
    #[serde(default = "d_weight_mode")]
    pub weight_mode: WeightMode,
    #[serde(default = "d_weight_amp")]
    pub weight_amp: f64,
    #[serde(default = "d_weight_width")]
    pub weight_width: f64,
    #[serde(default)]
    pub weight_imbalance: f64,
    #[serde(default = "d_weight_t2")]
    pub weight_t2_us: f64,
    #[serde(default = "d_fit_t2_init")]
    pub fit_t2_init_us: f64,
    #[serde(default = "d_benchmark")]
    pub benchmark: BenchmarkMode,

    // Tuning.
    #[serde(default = "d_sweep")]
    pub sweep_delta_t_us: Vec<f64>,
    #[serde(default = "d_objective_t_e")]
    pub objective_t_e_us: Vec<f64>,
    #[serde(default = "d_max_evals")]
    pub optimizer_max_evals: usize,
    #[serde(default = "d_optimizer_tol")]
    pub optimizer_tol: f64,
}

fn yes() -> bool {
    true
}
fn d_one() -> f64 {
    1.0
}
fn d_pump_efficiency() -> f64 {
    0.98
}
fn d_t2_gradient() -> f64 {
    5000.0
}
fn d_omega_jitter() -> f64 {
    1.7e-5
}
fn d_pump_delay() -> f64 {
    58.0
}
fn d_trace_format() -> TraceFormat {
    TraceFormat::PerTrace
}
fn d_delta_t() -> f64 {
    270.0
}
fn d_t_e_start() -> f64 {
    30.0
}
fn d_t_e_step() -> f64 {
    40.0
}
fn d_t_e_stop() -> f64 {
    710.0
}
fn d_steady() -> f64 {
    270.0
}
fn d_weight_mode() -> WeightMode {
    WeightMode::Fixed
}
fn d_weight_amp() -> f64 {
    300.0
}
fn d_weight_width() -> f64 {
    25.0
}
fn d_weight_t2() -> f64 {
    1600.0
}
fn d_fit_t2_init() -> f64 {
    1000.0
}
fn d_benchmark() -> BenchmarkMode {
    BenchmarkMode::Truth
}
fn d_sweep() -> Vec<f64> {
    vec![90.0, 150.0, 210.0, 270.0, 330.0, 390.0, 450.0]
}
fn d_objective_t_e() -> Vec<f64> {
    vec![460.0, 500.0, 540.0]
}
fn d_max_evals() -> usize {
    200
}
fn d_optimizer_tol() -> f64 {
    1e-4
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every field that a later stage would otherwise reject halfway
    /// through a run.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if !(self.larmor_period_us.is_finite() && self.larmor_period_us > 0.0) {
            return bad(format!(
                "larmor_period_us must be > 0, got {}",
                self.larmor_period_us
            ));
        }
        self.pulse_train(0)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.weights()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        for (name, v) in [
            ("delta_t_us", self.delta_t_us),
            ("t_e_step_us", self.t_e_step_us),
            ("fit_t2_init_us", self.fit_t2_init_us),
            ("optimizer_tol", self.optimizer_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if !(self.t_e_start_us.is_finite() && self.t_e_stop_us >= self.t_e_start_us) {
            return bad(format!(
                "t_e grid [{}, {}] is empty",
                self.t_e_start_us, self.t_e_stop_us
            ));
        }
        if self
            .sweep_delta_t_us
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return bad("sweep_delta_t_us entries must be finite and > 0".into());
        }
        if self.sweep_delta_t_us.is_empty() {
            return bad("sweep_delta_t_us is empty".into());
        }
        if self.objective_t_e_us.is_empty() || self.objective_t_e_us.iter().any(|v| !v.is_finite())
        {
            return bad("objective_t_e_us must hold finite times".into());
        }
        if self.optimizer_max_evals == 0 {
            return bad("optimizer_max_evals must be >= 1".into());
        }
        Ok(())
    }

    pub fn larmor_omega(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.larmor_period_us
    }

    pub fn pulse_train(&self, seed: u64) -> PulseTrainConfig {
        PulseTrainConfig {
            coupling: ProbeCoupling {
                g: self.g,
                photons_v: self.photons_v,
                photons_h: self.photons_h,
                eta: self.eta,
                p_return: self.p_return,
            },
            pulse_interval: self.pulse_interval_us,
            pulse_count: self.pulse_count,
            larmor_omega: self.larmor_omega(),
            t2_gradient: self.t2_gradient_us,
            omega_jitter_rms: self.omega_jitter_rms,
            phi0_offset: self.phi0_offset_rad,
            phi0_drift_rms: self.phi0_drift_rms_rad,
            pump_delay: self.pump_delay_us,
            readout_var_multiplier: self.readout_var_multiplier,
            quantum_noise: self.quantum_noise,
            css: CoherentSpinStateSpec {
                atoms_mean: self.atoms_mean,
                atoms_poisson: self.atoms_poisson,
                pump_efficiency: self.pump_efficiency,
            },
            seed,
        }
    }

    pub fn weights(&self) -> WeightParams {
        WeightParams {
            amp: self.weight_amp,
            width: self.weight_width,
            imbalance_slope: self.weight_imbalance,
            t2: self.weight_t2_us,
        }
    }

    /// Estimation times `start, start + step, …` up to `stop` inclusive.
    pub fn t_e_grid(&self) -> Vec<f64> {
        let n = ((self.t_e_stop_us - self.t_e_start_us) / self.t_e_step_us + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| self.t_e_start_us + i as f64 * self.t_e_step_us)
            .collect()
    }

    pub fn tracking_setup(&self, t_e: Vec<f64>, weights: WeightParams) -> TrackingSetup {
        TrackingSetup {
            g: self.g,
            t_e,
            delta_t: self.delta_t_us,
            weights,
            init: FidModelParams {
                g: self.g,
                omega_l: self.larmor_omega(),
                t2: self.fit_t2_init_us,
                phi0: self.phi0_offset_rad,
            },
        }
    }

    /// Seed given on the command line, else the config's, else 1.
    pub fn effective_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(1)
    }
}
