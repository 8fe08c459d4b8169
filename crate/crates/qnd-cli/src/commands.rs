use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qnd_core::calibration::{
    compute_alpha, coupling_moments, fit_mu1, fit_mu2, AtomDensity, ProbeBeam, StroboscopicConfig,
};
use qnd_core::estimator::{track_ensemble, BenchmarkSource, TrackingReport, WeightParams};
use qnd_core::exec::Execution;
use qnd_core::trajectory_sim::{simulate_ensemble, MeasurementTrace};
use qnd_core::tuning::{optimize_weights, sweep_delta_t, NelderMeadOptions, WeightOptimization};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{BenchmarkMode, RunConfig, TraceFormat, WeightMode};
use crate::error::CliError;
use crate::io::{self, num, Table};

pub const UNITS: &str = "times in us, angles in rad, angular frequencies in rad/us, \
spin components and variances in units of hbar and hbar^2, atoms and photons as counts";

/// Everything a command needs besides its own arguments.
pub struct Context {
    pub config_path: Option<PathBuf>,
    pub seed_flag: Option<u64>,
    pub out: PathBuf,
    pub exec: Execution,
}

impl Context {
    fn config(&self) -> Result<RunConfig, CliError> {
        let path = self
            .config_path
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs --config PATH".into()))?;
        RunConfig::from_path(path)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'static str,
    /// SHA-256 of the canonical JSON form of the resolved configuration.
    config_sha256: Option<String>,
    seed: Option<u64>,
    units: &'static str,
    arguments: BTreeMap<&'static str, Value>,
    config: Option<&'a RunConfig>,
}

fn config_hash(cfg: &RunConfig) -> Result<String, CliError> {
    let canonical = serde_json::to_vec(cfg)
        .map_err(|e| crate::error::io_error("cannot serialize config", e))?;
    Ok(io::sha256_hex(&canonical))
}

/// Write `manifest_<command>.json` into `out` before any computation.
fn write_manifest(
    out: &Path,
    command: &str,
    cfg: Option<&RunConfig>,
    seed: Option<u64>,
    arguments: BTreeMap<&'static str, Value>,
) -> Result<(), CliError> {
    io::create_dir(out)?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: cfg.map(config_hash).transpose()?,
        seed,
        units: UNITS,
        arguments,
        config: cfg,
    };
    io::write_json(&out.join(format!("manifest_{command}.json")), &manifest)
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.config()?;
    let seed = cfg.effective_seed(ctx.seed_flag);
    write_manifest(
        &ctx.out,
        "simulate",
        Some(&cfg),
        Some(seed),
        BTreeMap::new(),
    )?;
    let start = Instant::now();
    let traces = simulate_ensemble(&cfg.pulse_train(seed), cfg.repetitions, ctx.exec)?;
    let dir = ctx.out.join("traces");
    io::write_traces(&dir, &traces, cfg.trace_format == TraceFormat::Long)?;
    let warnings: usize = traces
        .iter()
        .filter_map(|t| t.truth.as_ref())
        .map(|t| t.spin_length_warnings)
        .sum();
    if warnings > 0 {
        eprintln!("warning: {warnings} pulse steps exceeded the spin-length bound");
    }
    eprintln!(
        "simulated {} traces of {} pulses into {} in {:.2?}",
        traces.len(),
        cfg.pulse_count,
        dir.display(),
        start.elapsed()
    );
    Ok(())
}

/// Traces from `--traces`, or simulated in memory from the config.
fn obtain_traces(
    cfg: &RunConfig,
    seed: u64,
    traces: Option<&Path>,
    exec: Execution,
) -> Result<(Vec<usize>, Vec<MeasurementTrace>), CliError> {
    match traces {
        Some(dir) => {
            let loaded = io::load_traces(dir)?;
            Ok((loaded.ids, loaded.traces))
        }
        None => {
            let traces = simulate_ensemble(&cfg.pulse_train(seed), cfg.repetitions, exec)?;
            Ok(((0..traces.len()).collect(), traces))
        }
    }
}

#[derive(Serialize)]
struct WeightsJson {
    amp: f64,
    width: f64,
    imbalance_slope: f64,
    t2_us: f64,
}

impl From<&WeightParams> for WeightsJson {
    fn from(w: &WeightParams) -> Self {
        WeightsJson {
            amp: w.amp,
            width: w.width,
            imbalance_slope: w.imbalance_slope,
            t2_us: w.t2,
        }
    }
}

fn run_optimizer(
    cfg: &RunConfig,
    traces: &[MeasurementTrace],
    exec: Execution,
) -> Result<WeightOptimization, CliError> {
    let setup = cfg.tracking_setup(cfg.objective_t_e_us.clone(), cfg.weights());
    let opts = NelderMeadOptions {
        tol: cfg.optimizer_tol,
        max_evals: cfg.optimizer_max_evals,
        ..NelderMeadOptions::default()
    };
    Ok(optimize_weights(traces, &setup, &opts, exec)?)
}

fn write_optimization(out: &Path, opt: &WeightOptimization) -> Result<(), CliError> {
    io::write_json(
        &out.join("weights.json"),
        &json!({
            "weights": WeightsJson::from(&opt.weights),
            "objective": opt.objective,
            "initial_objective": opt.initial_objective,
            "evaluations": opt.evaluations,
            "converged": opt.converged,
        }),
    )?;
    let mut t = Table::create(
        &out.join("weight_history.csv"),
        &["evaluation", "best_objective"],
    )?;
    for (i, v) in opt.history.iter().enumerate() {
        t.row([(i + 1).to_string(), num(*v)])?;
    }
    t.finish()
}

#[derive(Serialize)]
struct RowSummary {
    t_e_us: f64,
    n_traces: usize,
    n_failed: usize,
    n_warned: usize,
    psi_rad: f64,
}

#[derive(Serialize)]
struct TrackSummary {
    n_traces: usize,
    delta_t_us: f64,
    steady_state_from_us: f64,
    db_psi_steady: Option<f64>,
    db_rho_steady: Option<f64>,
    sql_crossing_us: Option<f64>,
    benchmark: BenchmarkMode,
    weights: WeightsJson,
    rows: Vec<RowSummary>,
}

pub fn track(ctx: &Context, traces_dir: &Path) -> Result<(), CliError> {
    let cfg = ctx.config()?;
    let seed = cfg.effective_seed(ctx.seed_flag);
    write_manifest(
        &ctx.out,
        "track",
        Some(&cfg),
        Some(seed),
        BTreeMap::from([("traces", path_value(traces_dir))]),
    )?;
    let loaded = io::load_traces(traces_dir)?;
    let source = match cfg.benchmark {
        BenchmarkMode::Truth if !loaded.has_truth => {
            return Err(CliError::Config(format!(
                "benchmark = \"truth\" needs {}, {} and {} in {}",
                io::TRUTH,
                io::TRUTH_ATOMS,
                io::TRUTH_PARAMS,
                traces_dir.display()
            )))
        }
        BenchmarkMode::Truth => BenchmarkSource::Truth,
        BenchmarkMode::Fitted => {
            let train = cfg.pulse_train(seed);
            BenchmarkSource::Fitted {
                atoms_per_pulse: (0..cfg.pulse_count)
                    .map(|k| train.expected_atoms(k))
                    .collect(),
            }
        }
    };
    let start = Instant::now();
    let weights = match cfg.weight_mode {
        WeightMode::Fixed => cfg.weights(),
        WeightMode::Optimize => {
            let opt = run_optimizer(&cfg, &loaded.traces, ctx.exec)?;
            write_optimization(&ctx.out, &opt)?;
            opt.weights
        }
    };
    let setup = cfg.tracking_setup(cfg.t_e_grid(), weights);
    let report = track_ensemble(&loaded.traces, &setup, &source, ctx.exec)?;
    write_report(&ctx.out, &report, &loaded.ids)?;

    let steady = report.steady_state_db(cfg.steady_state_from_us);
    let summary = TrackSummary {
        n_traces: loaded.traces.len(),
        delta_t_us: report.delta_t,
        steady_state_from_us: cfg.steady_state_from_us,
        db_psi_steady: steady.map(|s| s.1),
        db_rho_steady: steady.map(|s| s.0),
        sql_crossing_us: report.sql_crossing(),
        benchmark: cfg.benchmark,
        weights: WeightsJson::from(&weights),
        rows: report
            .rows
            .iter()
            .map(|r| RowSummary {
                t_e_us: r.t_e,
                n_traces: r.n_traces,
                n_failed: r.n_failed,
                n_warned: r.n_warned,
                psi_rad: r.polar.psi,
            })
            .collect(),
    };
    io::write_json(&ctx.out.join("summary.json"), &summary)?;
    let failed: usize = report.rows.iter().map(|r| r.n_failed).sum();
    if failed > 0 {
        eprintln!("warning: {failed} per-trace fits failed and were excluded");
    }
    eprintln!(
        "tracked {} traces at {} estimation times in {:.2?}; steady state {}",
        loaded.traces.len(),
        report.rows.len(),
        start.elapsed(),
        match steady {
            Some((rho, psi)) =>
                format!("{rho:.2} dB below Poisson (rho), {psi:.2} dB below SQL (psi)"),
            None => "not reached".into(),
        }
    );
    Ok(())
}

fn write_report(out: &Path, report: &TrackingReport, ids: &[usize]) -> Result<(), CliError> {
    let mut t = Table::create(
        &out.join("tracking_report.csv"),
        &[
            "t_e_us", "var_rho", "var_psi", "sql", "poisson", "db_rho", "db_psi", "n_traces",
        ],
    )?;
    for r in &report.rows {
        t.row([
            num(r.t_e),
            num(r.polar.var_rho),
            num(r.polar.var_psi),
            num(r.bench.sql),
            num(r.bench.poisson),
            num(r.db_rho),
            num(r.db_psi),
            r.n_traces.to_string(),
        ])?;
    }
    t.finish()?;
    let mut t = Table::create(
        &out.join("residuals.csv"),
        &["trace_id", "t_e_us", "Fcal_y", "Fcal_z"],
    )?;
    for r in &report.rows {
        for (&i, res) in r.ids.iter().zip(&r.cond.residuals) {
            t.row([ids[i].to_string(), num(r.t_e), num(res[0]), num(res[1])])?;
        }
    }
    t.finish()
}

pub fn sweep(ctx: &Context, traces_dir: Option<&Path>) -> Result<(), CliError> {
    let cfg = ctx.config()?;
    let seed = cfg.effective_seed(ctx.seed_flag);
    let args = traces_dir
        .map(|d| BTreeMap::from([("traces", path_value(d))]))
        .unwrap_or_default();
    write_manifest(&ctx.out, "sweep", Some(&cfg), Some(seed), args)?;
    let (_, traces) = obtain_traces(&cfg, seed, traces_dir, ctx.exec)?;
    let setup = cfg.tracking_setup(cfg.objective_t_e_us.clone(), cfg.weights());
    let result = sweep_delta_t(&traces, &setup, &cfg.sweep_delta_t_us, ctx.exec)?;
    for dt in &result.skipped {
        eprintln!("warning: delta_t = {dt} us skipped, its windows do not fit inside the traces");
    }
    if result.rows.is_empty() {
        return Err(CliError::Runtime(
            "every delta_t candidate was skipped".into(),
        ));
    }
    let mut t = Table::create(
        &ctx.out.join("sweep.csv"),
        &["delta_t_us", "trace_gamma_cond", "stderr"],
    )?;
    for r in &result.rows {
        t.row([num(r.delta_t), num(r.trace_gamma_cond), num(r.stderr)])?;
    }
    t.finish()?;
    let argmin = result.argmin().map(|r| r.delta_t);
    io::write_json(
        &ctx.out.join("sweep_summary.json"),
        &json!({
            "argmin_delta_t_us": argmin,
            "interior_minimum": result.has_interior_minimum(),
            "skipped_delta_t_us": result.skipped,
            "t_e_us": cfg.objective_t_e_us,
            "n_traces": traces.len(),
        }),
    )?;
    if let Some(dt) = argmin {
        eprintln!("minimum total conditional variance at delta_t = {dt} us");
    }
    Ok(())
}

pub fn optimize(ctx: &Context, traces_dir: Option<&Path>) -> Result<(), CliError> {
    let cfg = ctx.config()?;
    let seed = cfg.effective_seed(ctx.seed_flag);
    let args = traces_dir
        .map(|d| BTreeMap::from([("traces", path_value(d))]))
        .unwrap_or_default();
    write_manifest(&ctx.out, "optimize-weights", Some(&cfg), Some(seed), args)?;
    let (_, traces) = obtain_traces(&cfg, seed, traces_dir, ctx.exec)?;
    let opt = run_optimizer(&cfg, &traces, ctx.exec)?;
    write_optimization(&ctx.out, &opt)?;
    eprintln!(
        "objective {} -> {} after {} evaluations (A = {}, w = {}, r = {})",
        num(opt.initial_objective),
        num(opt.objective),
        opt.evaluations,
        num(opt.weights.amp),
        num(opt.weights.width),
        num(opt.weights.imbalance_slope)
    );
    Ok(())
}

/// Calibration JSON. Quantities a subcommand does not compute are `null`.
#[derive(Debug, Default, Serialize)]
pub struct CalibrationJson {
    pub mu1: Option<f64>,
    pub mu1_se: Option<f64>,
    pub mu2: Option<f64>,
    pub mu2_se: Option<f64>,
    pub v2: Option<f64>,
    pub v2_se: Option<f64>,
    pub alpha: Option<f64>,
    pub alpha_se: Option<f64>,
    pub beta: Option<f64>,
    pub beta_se: Option<f64>,
    /// Subcommand-specific fit details.
    pub details: BTreeMap<&'static str, Value>,
}

pub enum CalibrationRequest {
    Alpha(StroboscopicConfig),
    Mu1 {
        input: PathBuf,
    },
    Mu2 {
        input: PathBuf,
        alpha: f64,
    },
    Moments {
        density: AtomDensity,
        beam: ProbeBeam,
        samples: usize,
    },
}

impl CalibrationRequest {
    fn name(&self) -> &'static str {
        match self {
            CalibrationRequest::Alpha(_) => "alpha",
            CalibrationRequest::Mu1 { .. } => "mu1",
            CalibrationRequest::Mu2 { .. } => "mu2",
            CalibrationRequest::Moments { .. } => "moments",
        }
    }

    fn arguments(&self) -> BTreeMap<&'static str, Value> {
        match self {
            CalibrationRequest::Alpha(c) => BTreeMap::from([
                ("np", json!(c.n_pulses)),
                ("chi", json!(c.chi)),
                ("p", json!(c.p_return)),
                ("photons", json!(c.photons)),
                ("g", json!(c.g)),
                ("atoms", json!(c.atoms)),
            ]),
            CalibrationRequest::Mu1 { input } => BTreeMap::from([("input", path_value(input))]),
            CalibrationRequest::Mu2 { input, alpha } => {
                BTreeMap::from([("input", path_value(input)), ("alpha", json!(alpha))])
            }
            CalibrationRequest::Moments {
                density,
                beam,
                samples,
            } => BTreeMap::from([
                ("density", Value::String(format!("{density:?}"))),
                ("beam", Value::String(format!("{beam:?}"))),
                ("samples", json!(samples)),
            ]),
        }
    }
}

pub fn calibrate(ctx: &Context, req: &CalibrationRequest) -> Result<CalibrationJson, CliError> {
    let name = req.name();
    let seed = match req {
        CalibrationRequest::Moments { .. } => Some(ctx.seed_flag.unwrap_or(1)),
        _ => None,
    };
    write_manifest(
        &ctx.out,
        &format!("calibrate_{name}"),
        None,
        seed,
        req.arguments(),
    )?;
    let as_config = |e: qnd_core::Error| CliError::Config(e.to_string());
    let mut out = CalibrationJson::default();
    match req {
        CalibrationRequest::Alpha(c) => {
            c.validate().map_err(as_config)?;
            let r = compute_alpha(c)?;
            out.alpha = Some(r.alpha);
            out.beta = Some(r.beta);
            out.alpha_se = Some(0.0);
            out.beta_se = Some(0.0);
            out.details
                .insert("sy_projection_var", json!(r.sy_projection_var));
        }
        CalibrationRequest::Mu1 { input } => {
            let points = io::read_calibration_points(input)?;
            let f = fit_mu1(&points).map_err(as_config)?;
            out.mu1 = Some(f.mu1);
            out.mu1_se = Some(f.mu1_se);
            out.details.insert("a0", json!(f.a0));
            out.details.insert("a0_se", json!(f.a0_se));
            out.details.insert("points", json!(points.len()));
        }
        CalibrationRequest::Mu2 { input, alpha } => {
            let points = io::read_calibration_points(input)?;
            let f = fit_mu2(&points, *alpha).map_err(as_config)?;
            if f.negative_a1 {
                eprintln!("warning: fitted linear coefficient a1 is negative");
            }
            out.mu2 = Some(f.mu2);
            out.mu2_se = Some(f.mu2_se);
            out.alpha = Some(*alpha);
            for (k, v) in [
                ("a0", f.a0),
                ("a1", f.a1),
                ("a2", f.a2),
                ("a0_se", f.a0_se),
                ("a1_se", f.a1_se),
                ("a2_se", f.a2_se),
            ] {
                out.details.insert(k, json!(v));
            }
            out.details.insert("negative_a1", json!(f.negative_a1));
            out.details.insert("points", json!(points.len()));
        }
        CalibrationRequest::Moments {
            density,
            beam,
            samples,
        } => {
            let m = coupling_moments(density, beam, *samples, seed.unwrap_or(1), ctx.exec)
                .map_err(|e| match e {
                    qnd_core::Error::Domain(_) => as_config(e),
                    other => other.into(),
                })?;
            out.mu1 = Some(m.mu1);
            out.mu1_se = Some(m.mu1_se);
            out.mu2 = Some(m.mu2);
            out.mu2_se = Some(m.mu2_se);
            out.v2 = Some(m.v2);
            out.v2_se = Some(m.mu2_se);
            out.details.insert("samples", json!(m.samples));
        }
    }
    io::write_json(&ctx.out.join(format!("calibration_{name}.json")), &out)?;
    Ok(out)
}
