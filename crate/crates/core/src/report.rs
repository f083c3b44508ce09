//! Serialization of analysis results to the documented file formats.
//!
//! CSV columns are part of the tool's contract (downstream notebooks join
//! on them), so writers spell them out rather than relying on field order.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::Serialize;

use crate::bootstrap::ReplicateDiagnostic;
use crate::error::{Error, Result};
use crate::estimator::DisparityEstimate;
use crate::eval::{MetricsReport, SubgroupCalibrationRow, SubgroupMetricsRow};
use crate::ingest::CoverageReport;

/// One row of the disparity table: a scheme/group pair with its corrected
/// absolute rate, rate relative to the city average, and a 95% half-width
/// on the relative scale when a bootstrap ran.
#[derive(Debug, Clone, Serialize)]
pub struct DisparityRow {
    pub scheme: String,
    pub group: String,
    pub absolute_rate: f64,
    pub relative_rate: f64,
    pub ci_half_width: Option<f64>,
    pub n_cbgs: u64,
    pub population: f64,
}

pub fn disparity_rows(scheme: &str, estimates: &[DisparityEstimate]) -> Vec<DisparityRow> {
    estimates
        .iter()
        .map(|e| DisparityRow {
            scheme: scheme.to_string(),
            group: e.group_value.clone(),
            absolute_rate: e.absolute_rate,
            relative_rate: e.relative_rate,
            ci_half_width: e.ci_half_width,
            n_cbgs: e.n_cbgs,
            population: e.population,
        })
        .collect()
}

pub fn write_disparities_csv(path: &Path, rows: &[DisparityRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "scheme",
        "group",
        "absolute_rate",
        "relative_rate",
        "ci_half_width",
        "n_cbgs",
        "population",
    ])
    .map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record([
            row.scheme.as_str(),
            row.group.as_str(),
            &fmt(row.absolute_rate),
            &fmt(row.relative_rate),
            &row.ci_half_width.map(fmt).unwrap_or_default(),
            &row.n_cbgs.to_string(),
            &fmt(row.population),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["metric", "value"]).map_err(|e| csv_err(path, e))?;
    let rows: [(&str, f64); 5] = [
        ("threshold", report.threshold),
        ("precision", report.precision),
        ("recall", report.recall),
        ("auc", report.auc),
        ("average_precision", report.average_precision),
    ];
    for (name, value) in rows {
        w.write_record([name, &fmt(value)]).map_err(|e| csv_err(path, e))?;
    }
    w.write_record(["n", &report.n.to_string()])
        .map_err(|e| csv_err(path, e))?;
    w.write_record(["n_positive_labels", &report.n_positive_labels.to_string()])
        .map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_calibration_csv(path: &Path, rows: &[SubgroupCalibrationRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "subgroup",
        "side",
        "stratum",
        "rate",
        "ci_half_width",
        "n",
        "insufficient",
        "flagged",
    ])
    .map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record([
            row.subgroup.as_str(),
            row.side.as_str(),
            if row.stratum_flag { "1" } else { "0" },
            &fmt(row.rate),
            &fmt(row.half_width),
            &row.n.to_string(),
            if row.insufficient { "1" } else { "0" },
            if row.flagged { "1" } else { "0" },
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_subgroup_metrics_csv(path: &Path, rows: &[SubgroupMetricsRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["subgroup", "stratum", "n", "auc", "average_precision"])
        .map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record([
            row.subgroup.as_str(),
            if row.stratum_flag { "1" } else { "0" },
            &row.n.to_string(),
            &fmt(row.auc),
            &fmt(row.average_precision),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_cbg_counts_csv(path: &Path, report: &CoverageReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["cbg_id", "n_images"]).map_err(|e| csv_err(path, e))?;
    for (cbg_id, count) in &report.per_cbg_counts {
        w.write_record([cbg_id.as_str(), &count.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// 7x24 day-of-week x local-hour image counts; rows Monday..Sunday.
pub fn write_hour_day_csv(path: &Path, matrix: &[[u64; 24]; 7]) -> Result<()> {
    const DAYS: [&str; 7] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];
    let mut w = csv_writer(path)?;
    let mut header = vec!["day".to_string()];
    header.extend((0..24).map(|h| format!("h{:02}", h)));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (day, row) in DAYS.iter().zip(matrix.iter()) {
        let mut rec = vec![day.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_assignments_csv(
    path: &Path,
    assignments: &std::collections::BTreeMap<String, Option<String>>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["image_id", "cbg_id"]).map_err(|e| csv_err(path, e))?;
    for (image_id, cbg_id) in assignments {
        w.write_record([image_id.as_str(), cbg_id.as_deref().unwrap_or("")])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One JSON object per line, in replicate order.
pub fn write_replicates_jsonl(path: &Path, diagnostics: &[ReplicateDiagnostic]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for diag in diagnostics {
        let line = serde_json::to_string(diag)
            .map_err(|e| Error::Runtime(format!("serializing replicate diagnostic: {}", e)))?;
        writeln!(w, "{}", line).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON for any serializable report.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::Runtime(format!("serializing {}: {}", path.display(), e)))?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Full float precision without trailing noise: shortest representation
/// that round-trips (ryu, via the standard Display for f64).
fn fmt(v: f64) -> String {
    format!("{}", v)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Runtime(format!("writing {}: {}", path.display(), e))
}
