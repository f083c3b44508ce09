//! Python bindings for the deploystat estimator.
//!
//! Scalar operations return plain Python values; structured reports come
//! back as JSON strings (pair with `json.loads`). Precondition and schema
//! errors raise ValueError, everything else RuntimeError.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use deploystat::bootstrap::BootstrapConfig;
use deploystat::estimator;
use deploystat::eval::{self, ClassifierErrorModel};
use deploystat::ingest::{DetectionRecord, LabeledRecord};
use deploystat::pipeline::{
    cmd_coverage, cmd_disparities, cmd_validate, RunOptions, RunPaths, SchemeSpec, ThresholdSpec,
};
use deploystat::synth::{generate, ScoreModel, WorldSpec};
use deploystat::Error;

fn to_py_err(e: Error) -> PyErr {
    match &e {
        Error::Precondition(_)
        | Error::Schema { .. }
        | Error::InvalidRows { .. }
        | Error::Geometry { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn labeled(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Vec<LabeledRecord>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    Ok(scores
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (score, label))| LabeledRecord {
            detection: DetectionRecord {
                image_id: format!("r{}", i),
                lat: 0.0,
                lng: 0.0,
                timestamp: 0,
                score,
            },
            label,
        })
        .collect())
}

/// ROC AUC via average ranks (ties count half).
#[pyfunction]
fn rank_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(eval::rank_auc(&labeled(scores, labels)?))
}

/// Average precision over the descending-score sweep.
#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(eval::average_precision(&labeled(scores, labels)?))
}

/// The observed score that maximizes F1 (ties go to the larger score).
#[pyfunction]
fn select_threshold(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::select_threshold(&labeled(scores, labels)?).map_err(to_py_err)
}

/// Headline classifier metrics at a threshold, as a dict.
#[pyfunction]
fn binary_metrics<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<bool>,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = eval::binary_metrics(&labeled(scores, labels)?, threshold).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("threshold", m.threshold)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("auc", m.auc)?;
    d.set_item("average_precision", m.average_precision)?;
    d.set_item("n", m.n)?;
    d.set_item("n_positive_labels", m.n_positive_labels)?;
    Ok(d)
}

/// Precision and false omission rate at a threshold, with counts and
/// standard errors, as a dict.
#[pyfunction]
fn estimate_error_model<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<bool>,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = eval::estimate_error_model(&labeled(scores, labels)?, threshold).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("threshold", m.threshold)?;
    d.set_item("precision", m.precision)?;
    d.set_item("false_omission_rate", m.false_omission_rate)?;
    d.set_item("n_pred_positive", m.n_pred_positive)?;
    d.set_item("n_pred_negative", m.n_pred_negative)?;
    d.set_item("se_precision", m.se_precision)?;
    d.set_item("se_false_omission_rate", m.se_false_omission_rate)?;
    Ok(d)
}

/// Misclassification-corrected share: raw*precision + (1-raw)*FOR.
#[pyfunction]
fn corrected_rate(raw_rate: f64, precision: f64, false_omission_rate: f64) -> PyResult<f64> {
    let model =
        ClassifierErrorModel::external(0.5, precision, false_omission_rate).map_err(to_py_err)?;
    Ok(estimator::corrected_rate(raw_rate, &model))
}

/// Pearson correlation with a two-sided p-value; returns (r, p_value, n).
#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, f64, u64)> {
    if xs.len() != ys.len() {
        return Err(PyValueError::new_err(format!(
            "xs ({}) and ys ({}) differ in length",
            xs.len(),
            ys.len()
        )));
    }
    let pairs: Vec<(f64, f64)> = xs.into_iter().zip(ys).collect();
    let r = estimator::external_correlation(&pairs).map_err(to_py_err)?;
    Ok((r.r, r.p_value, r.n))
}

/// Generate a synthetic city into `out_dir` (census.csv, cbgs.geojson,
/// detections.csv, labels.csv, truth.json). Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (out_dir, preset = "gradient_city", rows = 10, cols = 10,
    images_per_cbg = 1000, seed = 0, validation = 2000, score_model = "beta",
    precision = 0.9, false_omission_rate = 0.01, threshold = 0.77))]
#[allow(clippy::too_many_arguments)]
fn generate_world<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    preset: &str,
    rows: usize,
    cols: usize,
    images_per_cbg: u64,
    seed: u64,
    validation: u64,
    score_model: &str,
    precision: f64,
    false_omission_rate: f64,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = match preset {
        "uniform" => WorldSpec::uniform(rows, cols, images_per_cbg, 0.1, seed),
        "gradient_city" => WorldSpec::gradient_city(rows, cols, images_per_cbg, seed),
        "station_gradient" => WorldSpec::station_gradient(rows, cols, images_per_cbg, seed),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown preset {:?} (expected uniform, gradient_city, or station_gradient)",
                other
            )))
        }
    };
    spec.n_validation = validation;
    match score_model {
        "beta" => {}
        "confusion" => {
            spec.score_model = ScoreModel::CalibratedConfusion {
                precision,
                false_omission_rate,
                threshold,
            };
        }
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown score_model {:?} (expected beta or confusion)",
                other
            )))
        }
    }
    let world = generate(&spec).map_err(to_py_err)?;
    world.write_files(&out_dir).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("out_dir", out_dir)?;
    d.set_item("n_cbgs", world.cbgs.len())?;
    d.set_item("n_detections", world.detections.len())?;
    d.set_item("n_validation", world.validation.len())?;
    d.set_item("city_average", world.truth.city_average)?;
    Ok(d)
}

fn build_paths(
    detections: Option<PathBuf>,
    labels: Option<PathBuf>,
    census: PathBuf,
    geometry: PathBuf,
    out_dir: PathBuf,
) -> RunPaths {
    RunPaths {
        detections: detections.unwrap_or_default(),
        labels,
        census,
        geometry,
        out_dir,
    }
}

#[allow(clippy::too_many_arguments)]
fn build_options(
    threshold: Option<f64>,
    residential_only: bool,
    schemes: Option<Vec<String>>,
    min_images_per_cbg: u64,
    precision: Option<f64>,
    false_omission_rate: Option<f64>,
    replicates: usize,
    seed: u64,
    bootstrap: bool,
) -> PyResult<RunOptions> {
    let schemes = match schemes {
        Some(names) => names
            .iter()
            .map(|n| SchemeSpec::parse(n).map_err(PyValueError::new_err))
            .collect::<PyResult<Vec<_>>>()?,
        None => SchemeSpec::DEFAULT.to_vec(),
    };
    let explicit_error_model = match (precision, false_omission_rate) {
        (Some(p), Some(f)) => Some((p, f)),
        (None, None) => None,
        _ => {
            return Err(PyValueError::new_err(
                "an external error model needs both precision and false_omission_rate",
            ))
        }
    };
    Ok(RunOptions {
        threshold: threshold.map_or(ThresholdSpec::Auto, ThresholdSpec::Fixed),
        residential_only,
        schemes,
        min_images_per_cbg,
        explicit_error_model,
        bootstrap: bootstrap.then(|| BootstrapConfig {
            n_replicates: replicates,
            seed,
            ..Default::default()
        }),
        ..Default::default()
    })
}

/// Classifier metrics plus the subgroup calibration audit; writes report
/// files into `out_dir` and returns the full report as a JSON string.
#[pyfunction]
#[pyo3(signature = (labels, census, geometry, out_dir, threshold = None))]
fn run_validate(
    labels: PathBuf,
    census: PathBuf,
    geometry: PathBuf,
    out_dir: PathBuf,
    threshold: Option<f64>,
) -> PyResult<String> {
    let paths = build_paths(None, Some(labels), census, geometry, out_dir);
    let options = build_options(threshold, false, None, 1, None, None, 0, 0, false)?;
    let out = cmd_validate(&paths, &options).map_err(to_py_err)?;
    serde_json::to_string(&out).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Census-reweighted, error-corrected group disparities; writes report
/// files into `out_dir` and returns the full report as a JSON string.
#[pyfunction]
#[pyo3(signature = (detections, census, geometry, out_dir, labels = None,
    threshold = None, residential_only = false, schemes = None,
    min_images_per_cbg = 1, precision = None, false_omission_rate = None,
    replicates = 1000, seed = 0, bootstrap = true))]
#[allow(clippy::too_many_arguments)]
fn run_disparities(
    detections: PathBuf,
    census: PathBuf,
    geometry: PathBuf,
    out_dir: PathBuf,
    labels: Option<PathBuf>,
    threshold: Option<f64>,
    residential_only: bool,
    schemes: Option<Vec<String>>,
    min_images_per_cbg: u64,
    precision: Option<f64>,
    false_omission_rate: Option<f64>,
    replicates: usize,
    seed: u64,
    bootstrap: bool,
) -> PyResult<String> {
    let paths = build_paths(Some(detections), labels, census, geometry, out_dir);
    let options = build_options(
        threshold,
        residential_only,
        schemes,
        min_images_per_cbg,
        precision,
        false_omission_rate,
        replicates,
        seed,
        bootstrap,
    )?;
    let out = cmd_disparities(&paths, &options).map_err(to_py_err)?;
    serde_json::to_string(&out).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Spatial/temporal coverage of the detection set; writes report files
/// into `out_dir` and returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (detections, census, geometry, out_dir))]
fn run_coverage(
    detections: PathBuf,
    census: PathBuf,
    geometry: PathBuf,
    out_dir: PathBuf,
) -> PyResult<String> {
    let paths = build_paths(Some(detections), None, census, geometry, out_dir);
    let options = RunOptions {
        bootstrap: None,
        ..Default::default()
    };
    let out = cmd_coverage(&paths, &options).map_err(to_py_err)?;
    serde_json::to_string(&out).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn deploystat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rank_auc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(select_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(binary_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_error_model, m)?)?;
    m.add_function(wrap_pyfunction!(corrected_rate, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(generate_world, m)?)?;
    m.add_function(wrap_pyfunction!(run_validate, m)?)?;
    m.add_function(wrap_pyfunction!(run_disparities, m)?)?;
    m.add_function(wrap_pyfunction!(run_coverage, m)?)?;
    Ok(())
}
