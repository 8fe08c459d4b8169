//! CSV and JSON artifacts.
//!
//! Numbers are written in the shortest form that round-trips to the same
//! `f64`, so reruns produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use qnd_core::trajectory_sim::{MeasurementTrace, TraceTruth};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_error, CliError};

pub const LONG_TRACES: &str = "traces.csv";
pub const TRUTH: &str = "truth.csv";
pub const TRUTH_ATOMS: &str = "truth_atoms.csv";
pub const TRUTH_PARAMS: &str = "truth_params.csv";

/// Shortest round-trip decimal, switching to exponent form outside
/// `[1e-4, 1e7)`.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e7).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(&format!("cannot create {}", dir.display()), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| io_error("cannot serialize JSON", e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(&format!("cannot write {}", path.display()), e))
}

/// CSV writer over rows of already formatted fields.
pub struct Table {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl Table {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| io_error(&format!("cannot create {}", path.display()), e))?;
        writer
            .write_record(header)
            .map_err(|e| io_error(&format!("cannot write {}", path.display()), e))?;
        Ok(Table {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer
            .write_record(fields)
            .map_err(|e| io_error(&format!("cannot write {}", self.path.display()), e))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.writer
            .flush()
            .map_err(|e| io_error(&format!("cannot write {}", self.path.display()), e))
    }
}

pub fn trace_file_name(id: usize) -> String {
    format!("trace_{id:04}.csv")
}

/// Write traces and, when present, their truth sidecars into `dir`.
pub fn write_traces(dir: &Path, traces: &[MeasurementTrace], long: bool) -> Result<(), CliError> {
    create_dir(dir)?;
    if long {
        let mut t = Table::create(&dir.join(LONG_TRACES), &["trace_id", "t_us", "phi_rad"])?;
        for (id, tr) in traces.iter().enumerate() {
            for (time, phi) in tr.times.iter().zip(&tr.angles) {
                t.row([id.to_string(), num(*time), num(*phi)])?;
            }
        }
        t.finish()?;
    } else {
        for (id, tr) in traces.iter().enumerate() {
            let mut t = Table::create(&dir.join(trace_file_name(id)), &["t_us", "phi_rad"])?;
            for (time, phi) in tr.times.iter().zip(&tr.angles) {
                t.row([num(*time), num(*phi)])?;
            }
            t.finish()?;
        }
    }
    if traces.iter().all(|t| t.truth.is_some()) && !traces.is_empty() {
        let mut spin = Table::create(&dir.join(TRUTH), &["trace_id", "t_us", "Fy", "Fz"])?;
        let mut atoms = Table::create(&dir.join(TRUTH_ATOMS), &["trace_id", "t_us", "atoms"])?;
        let mut params = Table::create(
            &dir.join(TRUTH_PARAMS),
            &[
                "trace_id",
                "atoms_drawn",
                "omega_rad_per_us",
                "phi0_rad",
                "spin_length_warnings",
            ],
        )?;
        for (id, tr) in traces.iter().enumerate() {
            let truth = tr.truth.as_ref().expect("checked above");
            for (k, time) in tr.times.iter().enumerate() {
                spin.row([
                    id.to_string(),
                    num(*time),
                    num(truth.fy[k]),
                    num(truth.fz[k]),
                ])?;
                atoms.row([id.to_string(), num(*time), num(truth.atoms[k])])?;
            }
            params.row([
                id.to_string(),
                num(truth.atoms_drawn),
                num(truth.omega),
                num(truth.phi0),
                truth.spin_length_warnings.to_string(),
            ])?;
        }
        spin.finish()?;
        atoms.finish()?;
        params.finish()?;
    }
    Ok(())
}

/// Traces read back from a directory, ordered by trace id.
#[derive(Debug, Clone)]
pub struct LoadedTraces {
    pub ids: Vec<usize>,
    pub traces: Vec<MeasurementTrace>,
    pub has_truth: bool,
}

fn input_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

fn open_csv(path: &Path, header: &[&str]) -> Result<csv::Reader<fs::File>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| input_error(path, e))?;
    let got = r.headers().map_err(|e| input_error(path, e))?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(input_error(
            path,
            format!(
                "expected header {}, found {}",
                header.join(","),
                got.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    Ok(r)
}

fn field<T: std::str::FromStr>(
    path: &Path,
    rec: &csv::StringRecord,
    i: usize,
) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    rec.get(i)
        .ok_or_else(|| input_error(path, format!("line {line}: missing column {i}")))?
        .trim()
        .parse()
        .map_err(|e| input_error(path, format!("line {line}: {e}")))
}

/// Read `(trace_id, t, a, b)`-style rows grouped by trace id.
fn read_grouped(path: &Path, header: &[&str]) -> Result<BTreeMap<usize, Vec<Vec<f64>>>, CliError> {
    let mut r = open_csv(path, header)?;
    let mut out: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| input_error(path, e))?;
        let id: usize = field(path, &rec, 0)?;
        let mut vals = Vec::with_capacity(header.len() - 1);
        for i in 1..header.len() {
            vals.push(field::<f64>(path, &rec, i)?);
        }
        out.entry(id).or_default().push(vals);
    }
    Ok(out)
}

/// Load every trace in `dir` (long format if `traces.csv` exists, else the
/// `trace_NNNN.csv` files) and attach truth sidecars when all three exist.
pub fn load_traces(dir: &Path) -> Result<LoadedTraces, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!(
            "traces directory {} does not exist",
            dir.display()
        )));
    }
    let mut series: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let long = dir.join(LONG_TRACES);
    if long.is_file() {
        for (id, rows) in read_grouped(&long, &["trace_id", "t_us", "phi_rad"])? {
            series.insert(id, rows.into_iter().map(|v| (v[0], v[1])).unzip());
        }
    } else {
        let entries = fs::read_dir(dir).map_err(|e| input_error(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| input_error(dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(id) = name
                .strip_prefix("trace_")
                .and_then(|s| s.strip_suffix(".csv"))
                .and_then(|s| s.parse::<usize>().ok())
            else {
                continue;
            };
            let mut r = open_csv(&path, &["t_us", "phi_rad"])?;
            let (mut t, mut y) = (Vec::new(), Vec::new());
            for rec in r.records() {
                let rec = rec.map_err(|e| input_error(&path, e))?;
                t.push(field::<f64>(&path, &rec, 0)?);
                y.push(field::<f64>(&path, &rec, 1)?);
            }
            if series.insert(id, (t, y)).is_some() {
                return Err(input_error(&path, format!("duplicate trace id {id}")));
            }
        }
    }
    if series.is_empty() {
        return Err(CliError::Config(format!(
            "no traces found in {}",
            dir.display()
        )));
    }
    let mut ids = Vec::with_capacity(series.len());
    let mut traces = Vec::with_capacity(series.len());
    for (id, (t, y)) in series {
        let tr = MeasurementTrace::new(t, y)
            .map_err(|e| CliError::Config(format!("trace {id}: {e}")))?;
        ids.push(id);
        traces.push(tr);
    }
    let has_truth = [TRUTH, TRUTH_ATOMS, TRUTH_PARAMS]
        .iter()
        .all(|f| dir.join(f).is_file());
    if has_truth {
        attach_truth(dir, &ids, &mut traces)?;
    }
    Ok(LoadedTraces {
        ids,
        traces,
        has_truth,
    })
}

fn attach_truth(
    dir: &Path,
    ids: &[usize],
    traces: &mut [MeasurementTrace],
) -> Result<(), CliError> {
    let spin = read_grouped(&dir.join(TRUTH), &["trace_id", "t_us", "Fy", "Fz"])?;
    let atoms = read_grouped(&dir.join(TRUTH_ATOMS), &["trace_id", "t_us", "atoms"])?;
    let params = read_grouped(
        &dir.join(TRUTH_PARAMS),
        &[
            "trace_id",
            "atoms_drawn",
            "omega_rad_per_us",
            "phi0_rad",
            "spin_length_warnings",
        ],
    )?;
    for (id, tr) in ids.iter().zip(traces.iter_mut()) {
        let missing = |f: &str| CliError::Config(format!("{f} has no rows for trace {id}"));
        let s = spin.get(id).ok_or_else(|| missing(TRUTH))?;
        let a = atoms.get(id).ok_or_else(|| missing(TRUTH_ATOMS))?;
        let p = params.get(id).ok_or_else(|| missing(TRUTH_PARAMS))?;
        if s.len() != tr.len() || a.len() != tr.len() || p.len() != 1 {
            return Err(CliError::Config(format!(
                "truth sidecars for trace {id} do not match its {} samples",
                tr.len()
            )));
        }
        tr.truth = Some(TraceTruth {
            fy: s.iter().map(|v| v[1]).collect(),
            fz: s.iter().map(|v| v[2]).collect(),
            atoms: a.iter().map(|v| v[1]).collect(),
            atoms_drawn: p[0][0],
            omega: p[0][1],
            phi0: p[0][2],
            spin_length_warnings: p[0][3] as usize,
        });
    }
    Ok(())
}

/// `N_A,value` calibration input.
pub fn read_calibration_points(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let mut r = open_csv(path, &["N_A", "value"])?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| input_error(path, e))?;
        out.push((field(path, &rec, 0)?, field(path, &rec, 1)?));
    }
    Ok(out)
}
