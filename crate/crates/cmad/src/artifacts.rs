//! Run directory files: metrics and curve CSVs, checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use cmad_core::diffgraph::Checkpoint;
use cmad_core::optimize::CurvePoint;

use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const SAMPLES_FILE: &str = "samples.pgm";
pub const POLICIES_FILE: &str = "policies.ckpt";
pub const SCORE_FILE: &str = "score.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const SCORE_CURVE_FILE: &str = "score_curve.csv";

pub fn agent_file(i: usize) -> String {
    format!("agent{i}.pgm")
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Format { path: path.to_path_buf(), message: format!("{other:?}") },
    }
}

pub fn write_metrics(path: &Path, metrics: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["metric", "value"]).map_err(|e| csv_err(path, e))?;
    for (k, v) in metrics {
        w.write_record([k.as_str(), &v.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<(String, f64)>> {
    if !path.exists() {
        return Err(CliError::io(path, std::io::ErrorKind::NotFound.into()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = || CliError::Format { path: path.to_path_buf(), message: format!("bad metrics row {rec:?}") };
        if rec.len() != 2 {
            return Err(bad());
        }
        let v: f64 = rec[1].parse().map_err(|_| bad())?;
        out.push((rec[0].to_string(), v));
    }
    Ok(out)
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["iteration", "outer", "agent", "ell_u", "ell_c", "ell_psi", "objective"])
        .map_err(|e| csv_err(path, e))?;
    for p in curve {
        let agent = p.agent.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([
            p.iteration.to_string(),
            p.outer.to_string(),
            agent,
            p.ell_u.to_string(),
            p.ell_c.to_string(),
            p.ell_psi.to_string(),
            p.objective.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// A single-column loss curve (`step,value`).
pub fn write_series(path: &Path, name: &str, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["step", name]).map_err(|e| csv_err(path, e))?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    // Write then rename so an interrupted run never leaves a torn file.
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, ck.encode()).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Checkpoint::decode(&text).map_err(|e| CliError::Format { path: path.to_path_buf(), message: e.to_string() })
}

pub fn create_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(dir.to_path_buf())
}
