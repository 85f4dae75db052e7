//! Long-format curve export for plotting.

use std::fs;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::{Error, Result};

pub const CURVES_FILE: &str = "curves.csv";

/// All `metrics.csv` files under `dir`, sorted by path. Run directories
/// (those holding a `summary.json`) without metrics are reported missing.
fn metric_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFiles(vec![dir.to_path_buf()]));
    }
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(
                path,
                e.into_io_error()
                    .unwrap_or_else(|| std::io::Error::other("walk failed")),
            )
        })?;
        if entry.file_type().is_dir() && entry.path().join("summary.json").is_file() {
            let metrics = entry.path().join("metrics.csv");
            if !metrics.is_file() {
                missing.push(metrics);
            }
        }
        if entry.file_type().is_file() && entry.file_name() == "metrics.csv" {
            found.push(entry.path().to_path_buf());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    if found.is_empty() {
        return Err(Error::MissingFiles(vec![dir.join("**").join("metrics.csv")]));
    }
    Ok(found)
}

/// One row per `(run, round, metric)` with a numeric value. The run id is
/// the run directory relative to `dir`; empty and list-valued cells are
/// skipped.
pub fn curves_csv(dir: &Path) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "round", "metric", "value"])?;
    for file in metric_files(dir)? {
        let run = file
            .parent()
            .and_then(|p| p.strip_prefix(dir).ok())
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        let mut r = csv::Reader::from_path(&file)?;
        let headers = r.headers()?.clone();
        let round_col = headers
            .iter()
            .position(|h| h == "round")
            .ok_or_else(|| Error::Consistency(format!("{} has no round column", file.display())))?;
        for record in r.records() {
            let record = record?;
            let round = &record[round_col];
            for (i, value) in record.iter().enumerate() {
                if i == round_col || value.is_empty() || value.parse::<f64>().is_err() {
                    continue;
                }
                w.write_record([run.as_str(), round, &headers[i], value])?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::io("<curves buffer>", e.into_error()))
}

/// Writes `curves.csv` into `dir` (or to `dest`) and returns its path.
pub fn export_curves(dir: &Path, dest: Option<&Path>) -> Result<PathBuf> {
    let bytes = curves_csv(dir)?;
    let path = dest.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CURVES_FILE));
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
