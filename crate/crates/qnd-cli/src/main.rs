//! `qnd`: simulate, track and calibrate QND measurements of a precessing
//! atomic spin from a flat configuration file.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qnd_core::calibration::{AtomDensity, ProbeBeam, StroboscopicConfig};
use qnd_core::exec::Execution;

use crate::commands::{CalibrationRequest, Context};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "qnd",
    version,
    about = "Desk-scale simulation and analysis of QND tracking of a precessing spin",
    after_help = "Units: times in us, angles in rad, angular frequencies in rad/us, spin \
                  components in units of hbar, atoms and photons as counts.\n\
                  Exit status: 0 success, 2 configuration or input error, 3 runtime error."
)]
struct Cli {
    /// Flat TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the `seed` key of the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads; 1 runs everything on the calling thread. Outputs do
    /// not depend on this value.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the configured ensemble and write traces plus truth sidecars
    /// to `<out>/traces`.
    Simulate,
    /// Track the spin through a directory of traces and write the report,
    /// residuals and summary.
    Track {
        /// Directory holding `trace_NNNN.csv` files or `traces.csv`.
        #[arg(long, value_name = "DIR")]
        traces: PathBuf,
    },
    /// Calibration computations; results are printed and written as JSON.
    Calibrate {
        #[command(subcommand)]
        what: Calibrate,
    },
    /// Total conditional variance for every candidate window length.
    Sweep {
        /// Analyse these traces instead of simulating from the config.
        #[arg(long, value_name = "DIR")]
        traces: Option<PathBuf>,
    },
    /// Optimise the global-fit weight parameters for the tracking objective.
    OptimizeWeights {
        /// Analyse these traces instead of simulating from the config.
        #[arg(long, value_name = "DIR")]
        traces: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DensityKind {
    Point,
    LorentzianGaussian,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BeamKind {
    Uniform,
    Gaussian,
}

#[derive(Debug, Subcommand)]
enum Calibrate {
    /// Scattering-noise factor of a stroboscopic pulse train.
    Alpha {
        /// Survival probability per pulse.
        #[arg(long)]
        chi: f64,
        /// Return probability of scattered atoms.
        #[arg(long)]
        p: f64,
        /// Number of pulses.
        #[arg(long)]
        np: usize,
        /// Photons per pulse.
        #[arg(long, default_value_t = 3.15e7)]
        photons: f64,
        /// Coupling, rad per unit spin.
        #[arg(long, default_value_t = 7.07e-8)]
        g: f64,
        #[arg(long, default_value_t = 1.0e6)]
        atoms: f64,
    },
    /// Linear fit of mean rotation against atom number (CSV `N_A,value`).
    Mu1 {
        #[arg(long, value_name = "CSV")]
        input: PathBuf,
    },
    /// Quadratic fit of rotation variance against atom number
    /// (CSV `N_A,value`).
    Mu2 {
        #[arg(long, value_name = "CSV")]
        input: PathBuf,
        #[arg(long)]
        alpha: f64,
    },
    /// Monte Carlo coupling moments of an atom cloud in a probe beam.
    Moments {
        #[arg(long, value_enum, default_value = "lorentzian-gaussian")]
        density: DensityKind,
        /// Axial FWHM of the cloud, um.
        #[arg(long, default_value_t = 4000.0)]
        axial_fwhm: f64,
        /// Transverse standard deviation of the cloud, um.
        #[arg(long, default_value_t = 33.0)]
        radial_sigma: f64,
        #[arg(long, value_enum, default_value = "gaussian")]
        beam: BeamKind,
        /// Peak (or uniform) coupling, rad per unit spin.
        #[arg(long, default_value_t = 1.0e-7)]
        g_peak: f64,
        /// Beam waist, um.
        #[arg(long, default_value_t = 50.0)]
        waist: f64,
        /// Rayleigh range, um; `inf` for a collimated beam.
        #[arg(long, default_value_t = f64::INFINITY)]
        rayleigh_range: f64,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
    },
}

impl Calibrate {
    fn request(self) -> CalibrationRequest {
        match self {
            Calibrate::Alpha {
                chi,
                p,
                np,
                photons,
                g,
                atoms,
            } => CalibrationRequest::Alpha(StroboscopicConfig {
                n_pulses: np,
                photons,
                chi,
                p_return: p,
                g,
                atoms,
            }),
            Calibrate::Mu1 { input } => CalibrationRequest::Mu1 { input },
            Calibrate::Mu2 { input, alpha } => CalibrationRequest::Mu2 { input, alpha },
            Calibrate::Moments {
                density,
                axial_fwhm,
                radial_sigma,
                beam,
                g_peak,
                waist,
                rayleigh_range,
                samples,
            } => CalibrationRequest::Moments {
                density: match density {
                    DensityKind::Point => AtomDensity::Point,
                    DensityKind::LorentzianGaussian => AtomDensity::LorentzianGaussian {
                        axial_fwhm,
                        radial_sigma,
                    },
                },
                beam: match beam {
                    BeamKind::Uniform => ProbeBeam::Uniform { g0: g_peak },
                    BeamKind::Gaussian => ProbeBeam::Gaussian {
                        g_peak,
                        waist,
                        rayleigh_range,
                    },
                },
                samples,
            },
        }
    }
}

fn run(cli: Cli, exec: Execution) -> Result<(), CliError> {
    let ctx = Context {
        config_path: cli.config,
        seed_flag: cli.seed,
        out: cli.out,
        exec,
    };
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Track { traces } => commands::track(&ctx, &traces),
        Command::Sweep { traces } => commands::sweep(&ctx, traces.as_deref()),
        Command::OptimizeWeights { traces } => commands::optimize(&ctx, traces.as_deref()),
        Command::Calibrate { what } => {
            let out = commands::calibrate(&ctx, &what.request())?;
            let text = serde_json::to_string_pretty(&out)
                .map_err(|e| error::io_error("cannot serialize JSON", e))?;
            println!("{text}");
            Ok(())
        }
    }
}

#[cfg(feature = "parallel")]
fn run_with_jobs(cli: Cli) -> Result<(), CliError> {
    match cli.jobs {
        Some(0) => Err(CliError::Config("--jobs must be >= 1".into())),
        Some(1) => run(cli, Execution::Sequential),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| error::io_error("cannot start worker pool", e))?;
            pool.install(|| run(cli, Execution::Parallel))
        }
        None => run(cli, Execution::Parallel),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_with_jobs(cli: Cli) -> Result<(), CliError> {
    if cli.jobs == Some(0) {
        return Err(CliError::Config("--jobs must be >= 1".into()));
    }
    run(cli, Execution::Sequential)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_with_jobs(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qnd: {e}");
            e.exit_code()
        }
    }
}
