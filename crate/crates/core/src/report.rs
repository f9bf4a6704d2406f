//! Report bundle I/O: per-instance prediction records as JSON lines,
//! aggregated metric CSVs, and the replayable run manifest.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ResolvedExperiment;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalRecord};
use crate::pipeline::PredictionRecord;

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const UNCERTAINTY_FILE: &str = "piwpv.csv";
pub const BINS_FILE: &str = "bins.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to replay a run bit-for-bit, plus provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: ResolvedExperiment,
    pub checkpoint: Option<String>,
    /// Perturbation label of this report ("clean" when none).
    pub perturb_label: String,
}

impl RunManifest {
    pub fn new(config: &ResolvedExperiment, checkpoint: Option<&Path>, label: &str) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.model.hash(),
            config: config.clone(),
            checkpoint: checkpoint.map(|p| p.display().to_string()),
            perturb_label: label.to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest parse: {e}")))
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Config(format!("record serialization: {e}")))?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open report {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("bad record on line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Summary metrics of one report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportMetrics {
    pub label: String,
    pub instances: usize,
    pub accuracy: f64,
    pub ece10: f64,
}

pub fn compute_metrics(label: &str, records: &[PredictionRecord]) -> Result<ReportMetrics> {
    let evals: Vec<EvalRecord> = records.iter().map(|r| r.eval_record()).collect();
    Ok(ReportMetrics {
        label: label.to_string(),
        instances: records.len(),
        accuracy: metrics::accuracy(&evals)?,
        ece10: metrics::ece10(&evals)?,
    })
}

/// One row per report label: accuracy and calibration.
pub fn write_metrics_csv(path: &Path, rows: &[ReportMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["label", "instances", "accuracy", "ece10"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.instances.to_string(),
            format!("{:.17}", r.accuracy),
            format!("{:.17}", r.ece10),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, usize, f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        out.push((
            row[0].to_string(),
            row[1].parse().map_err(|_| Error::Data("bad csv int".into()))?,
            row[2].parse().map_err(|_| Error::Data("bad csv float".into()))?,
            row[3].parse().map_err(|_| Error::Data("bad csv float".into()))?,
        ));
    }
    Ok(out)
}

/// Mean PIW/PV per (predicted class, correctness) cell.
pub fn write_uncertainty_csv(path: &Path, records: &[PredictionRecord], classes: usize) -> Result<()> {
    let cells: Vec<(usize, bool, f64, f64)> = records
        .iter()
        .map(|r| {
            (
                r.class,
                r.class == r.true_class,
                r.piw[r.class],
                r.pv[r.class],
            )
        })
        .collect();
    let rows = metrics::uncertainty_table(&cells, classes);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["class", "correct", "count", "mean_piw", "mean_pv"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.class.to_string(),
            r.correct.to_string(),
            r.count.to_string(),
            format!("{:.17}", r.mean_piw),
            format!("{:.17}", r.mean_pv),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reliability-bin statistics for external plotting.
pub fn write_bins_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let evals: Vec<EvalRecord> = records.iter().map(|r| r.eval_record()).collect();
    let bins = metrics::bin_stats(&evals)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["lo", "hi", "count", "accuracy", "mean_confidence"])
        .map_err(csv_err)?;
    for b in bins {
        w.write_record([
            format!("{}", b.lo),
            format!("{}", b.hi),
            b.count.to_string(),
            format!("{:.17}", b.accuracy),
            format!("{:.17}", b.mean_confidence),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Write the whole bundle for one labeled report into `dir`.
pub fn write_bundle(
    dir: &Path,
    manifest: &RunManifest,
    records: &[PredictionRecord],
    classes: usize,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    write_predictions(&dir.join(PREDICTIONS_FILE), records)?;
    let metrics_row = compute_metrics(&manifest.perturb_label, records)?;
    write_metrics_csv(&dir.join(METRICS_FILE), &[metrics_row])?;
    write_uncertainty_csv(&dir.join(UNCERTAINTY_FILE), records, classes)?;
    write_bins_csv(&dir.join(BINS_FILE), records)?;
    Ok(dir.to_path_buf())
}
