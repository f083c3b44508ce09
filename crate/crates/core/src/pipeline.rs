//! End-to-end commands over files on disk: validate a classifier against
//! labels, estimate deployment disparities, and report coverage. The CLI is
//! a thin wrapper over these; tests drive them directly.

use std::collections::{BTreeMap, BTreeSet};
use std::iter::repeat_n;
use std::path::PathBuf;

use serde::Serialize;

use crate::bootstrap::{bootstrap_disparities, BootstrapConfig, ReplicateDiagnostic};
use crate::error::{Error, Result};
use crate::estimator::{
    cbg_prevalence, quartile_scheme, relative_disparities, DisparityEstimate, GroupingScheme,
    QuartileAttribute,
};
use crate::eval::{
    binary_metrics, calibration_audit, estimate_error_model, flagged_subgroups, select_threshold,
    subgroup_metrics, ClassifierErrorModel, MetricsReport, SubgroupCalibrationRow, SubgroupFlags,
    SubgroupMetricsRow,
};
use crate::geoindex::{build_index, SpatialIndex};
use crate::ingest::{
    coverage_report, deduplicate, is_daytime, is_weekend, load_cbgs, load_detections,
    load_labeled, local_day_of_week, local_hour, CensusBlockGroup, CoverageReport,
    DetectionRecord, Format, HoursMode, LabeledRecord, TimeWindow, ZoneType,
    DEFAULT_UTC_OFFSET_SECS,
};
use crate::report;

#[derive(Debug, Clone)]
pub struct RunPaths {
    pub detections: PathBuf,
    /// Labeled validation records; required by `validate`, and by
    /// `disparities` unless an explicit error model is given.
    pub labels: Option<PathBuf>,
    pub census: PathBuf,
    pub geometry: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSpec {
    /// Pick the F1-maximizing score on the validation set.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeSpec {
    PopulationGroups,
    Borough,
    ZoneType,
    Neighborhood,
    IncomeQuartile,
    DensityQuartile,
}

impl SchemeSpec {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "population_group" | "population-group" | "groups" => Ok(Self::PopulationGroups),
            "borough" => Ok(Self::Borough),
            "zone_type" | "zone-type" | "zone" => Ok(Self::ZoneType),
            "neighborhood" => Ok(Self::Neighborhood),
            "income_quartile" | "income-quartile" | "income" => Ok(Self::IncomeQuartile),
            "density_quartile" | "density-quartile" | "density" => Ok(Self::DensityQuartile),
            other => Err(format!(
                "unknown scheme {:?} (expected population_group, borough, zone_type, \
                 neighborhood, income_quartile, or density_quartile)",
                other
            )),
        }
    }

    pub const DEFAULT: [SchemeSpec; 5] = [
        SchemeSpec::PopulationGroups,
        SchemeSpec::Borough,
        SchemeSpec::ZoneType,
        SchemeSpec::IncomeQuartile,
        SchemeSpec::DensityQuartile,
    ];
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub threshold: ThresholdSpec,
    /// Restrict disparity estimation (groups and city average alike) to
    /// residential CBGs.
    pub residential_only: bool,
    pub schemes: Vec<SchemeSpec>,
    /// CBGs with fewer assigned images than this are dropped from the
    /// analysis set before estimation.
    pub min_images_per_cbg: u64,
    pub utc_offset_secs: i64,
    pub hours_mode: HoursMode,
    /// None = point estimates only, no intervals.
    pub bootstrap: Option<BootstrapConfig>,
    /// (precision, false omission rate) supplied externally instead of
    /// being estimated from labels.
    pub explicit_error_model: Option<(f64, f64)>,
    /// Restrict analysis to records inside this window; also the coverage
    /// denominator. None = derive from the data for coverage, no filter
    /// for disparities.
    pub window: Option<TimeWindow>,
    pub dump_replicates: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            threshold: ThresholdSpec::Auto,
            residential_only: false,
            schemes: SchemeSpec::DEFAULT.to_vec(),
            min_images_per_cbg: 1,
            utc_offset_secs: DEFAULT_UTC_OFFSET_SECS,
            hours_mode: HoursMode::Calendar,
            bootstrap: Some(BootstrapConfig::default()),
            explicit_error_model: None,
            window: None,
            dump_replicates: false,
        }
    }
}

pub struct LoadedInputs {
    pub cbgs: Vec<CensusBlockGroup>,
    pub index: SpatialIndex,
    pub detections: Vec<DetectionRecord>,
    pub duplicates_removed: u64,
}

/// Load and validate the shared inputs: census + geometry (strict join),
/// detections (deduplicated, optionally window-filtered), spatial index.
pub fn load_inputs(paths: &RunPaths, window: Option<TimeWindow>) -> Result<LoadedInputs> {
    let cbgs = load_cbgs(&paths.census, &paths.geometry)?;
    let index = build_index(&cbgs)?;
    let format = Format::from_path(&paths.detections)?;
    let raw = load_detections(&paths.detections, format)?;
    let (mut detections, duplicates_removed) = deduplicate(raw);
    if let Some(w) = window {
        detections.retain(|r| w.contains(r.timestamp));
    }
    Ok(LoadedInputs {
        cbgs,
        index,
        detections,
        duplicates_removed,
    })
}

fn load_labels(paths: &RunPaths, purpose: &str) -> Result<Vec<LabeledRecord>> {
    let path = paths.labels.as_ref().ok_or_else(|| {
        Error::Precondition(format!("{} requires a labels file (none given)", purpose))
    })?;
    let records = load_labeled(path, Format::from_path(path)?)?;
    if records.is_empty() {
        return Err(Error::schema(path, "labels file has no records"));
    }
    Ok(records)
}

fn resolve_threshold(spec: ThresholdSpec, labels: Option<&[LabeledRecord]>) -> Result<f64> {
    match spec {
        ThresholdSpec::Fixed(t) => {
            if !t.is_finite() || !(0.0..=1.0).contains(&t) {
                return Err(Error::Precondition(format!(
                    "threshold {} outside [0, 1]",
                    t
                )));
            }
            Ok(t)
        }
        ThresholdSpec::Auto => {
            let records = labels.ok_or_else(|| {
                Error::Precondition(
                    "no fixed threshold given and no labels to select one from".into(),
                )
            })?;
            select_threshold(records)
        }
    }
}

// ---------------------------------------------------------------------------
// validate

#[derive(Debug, Serialize)]
pub struct ValidateOutput {
    pub metrics: MetricsReport,
    pub error_model: ClassifierErrorModel,
    pub calibration: Vec<SubgroupCalibrationRow>,
    pub flagged_subgroups: Vec<String>,
    pub subgroup_metrics: Vec<SubgroupMetricsRow>,
    /// Subgroups whose ranking metrics were skipped (a stratum lacked one
    /// of the label classes), with the reason.
    pub skipped_subgroup_metrics: Vec<(String, String)>,
}

/// Evaluate the classifier on the labeled validation set: headline metrics,
/// the error model at the working threshold, and a calibration audit across
/// census and time subgroups. Writes metrics.{json,csv}, calibration
/// tables, and subgroup ranking metrics into `out_dir`.
pub fn cmd_validate(paths: &RunPaths, options: &RunOptions) -> Result<ValidateOutput> {
    let records = load_labels(paths, "validate")?;
    let threshold = resolve_threshold(options.threshold, Some(&records))?;
    let metrics = binary_metrics(&records, threshold)?;
    let error_model = estimate_error_model(&records, threshold)?;

    let cbgs = load_cbgs(&paths.census, &paths.geometry)?;
    let index = build_index(&cbgs)?;
    let flags = build_subgroup_flags(&records, &cbgs, &index, options.utc_offset_secs);

    let calibration = calibration_audit(&records, threshold, &flags)?;
    let flagged = flagged_subgroups(&calibration);

    // Ranking metrics per stratum are best-effort: a stratum with only one
    // label class has no AUC, which should not sink the whole audit.
    let mut metric_rows = Vec::new();
    let mut skipped = Vec::new();
    let subgroup_names: BTreeSet<String> = flags
        .values()
        .flat_map(|m| m.keys().cloned())
        .collect();
    for name in subgroup_names {
        let one: SubgroupFlags = flags
            .iter()
            .filter_map(|(id, m)| {
                m.get(&name)
                    .map(|&v| (id.clone(), BTreeMap::from([(name.clone(), v)])))
            })
            .collect();
        match subgroup_metrics(&records, threshold, &one) {
            Ok(rows) => metric_rows.extend(rows),
            Err(e) => skipped.push((name, e.to_string())),
        }
    }

    let out = ValidateOutput {
        metrics,
        error_model,
        calibration,
        flagged_subgroups: flagged,
        subgroup_metrics: metric_rows,
        skipped_subgroup_metrics: skipped,
    };

    std::fs::create_dir_all(&paths.out_dir).map_err(|e| Error::io(&paths.out_dir, e))?;
    report::write_json(&paths.out_dir.join("validate.json"), &out)?;
    report::write_metrics_csv(&paths.out_dir.join("metrics.csv"), &out.metrics)?;
    report::write_calibration_csv(&paths.out_dir.join("calibration.csv"), &out.calibration)?;
    report::write_subgroup_metrics_csv(
        &paths.out_dir.join("subgroup_metrics.csv"),
        &out.subgroup_metrics,
    )?;
    Ok(out)
}

/// Census and time subgroup flags for each labeled record, for the
/// calibration audit. Census subgroups need a spatial assignment; records
/// that miss every CBG carry only the time flags. Median splits
/// (income, density, group percentages) are image-level: the median is
/// taken over assigned records, not over CBGs, and "above" is strict.
pub fn build_subgroup_flags(
    records: &[LabeledRecord],
    cbgs: &[CensusBlockGroup],
    index: &SpatialIndex,
    utc_offset_secs: i64,
) -> SubgroupFlags {
    let by_id: BTreeMap<&str, &CensusBlockGroup> =
        cbgs.iter().map(|c| (c.cbg_id.as_str(), c)).collect();
    let assigned: Vec<Option<&CensusBlockGroup>> = records
        .iter()
        .map(|r| {
            index
                .assign(r.detection.lat, r.detection.lng)
                .and_then(|id| by_id.get(id).copied())
        })
        .collect();

    let group_names: BTreeSet<String> = cbgs
        .iter()
        .flat_map(|c| c.populations.keys().cloned())
        .filter(|g| g != "total")
        .collect();
    let boroughs: BTreeSet<String> = cbgs.iter().map(|c| c.borough.clone()).collect();

    let median_over = |value_of: &dyn Fn(&CensusBlockGroup) -> Option<f64>| -> Option<f64> {
        let mut values: Vec<f64> = assigned
            .iter()
            .filter_map(|cbg| cbg.and_then(value_of))
            .collect();
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        Some(crate::estimator::nearest_rank(&values, 0.5))
    };

    let income_median = median_over(&|c| c.median_income);
    let density_median = median_over(&|c| Some(c.pop_density));
    let percent_medians: BTreeMap<&str, f64> = group_names
        .iter()
        .filter_map(|g| median_over(&|c| c.percent_of(g)).map(|m| (g.as_str(), m)))
        .collect();

    let mut flags: SubgroupFlags = BTreeMap::new();
    for (rec, cbg) in records.iter().zip(&assigned) {
        let entry = flags
            .entry(rec.detection.image_id.clone())
            .or_default();
        let ts = rec.detection.timestamp;
        entry.insert("daytime".to_string(), is_daytime(ts, utc_offset_secs));
        entry.insert("weekend".to_string(), is_weekend(ts, utc_offset_secs));
        if let Some(cbg) = cbg {
            if let (Some(income), Some(median)) = (cbg.median_income, income_median) {
                entry.insert("median_household_income".to_string(), income > median);
            }
            if let Some(median) = density_median {
                entry.insert("population_density".to_string(), cbg.pop_density > median);
            }
            for (g, median) in &percent_medians {
                if let Some(p) = cbg.percent_of(g) {
                    entry.insert(format!("percent_{}", g), p > *median);
                }
            }
            for b in &boroughs {
                entry.insert(format!("borough_{}", b), &cbg.borough == b);
            }
        }
    }
    flags
}

// ---------------------------------------------------------------------------
// disparities

#[derive(Debug, Serialize)]
pub struct SchemeOutput {
    pub scheme: String,
    /// Image-weighted quartile boundaries (q1|q2, q2|q3, q3|q4) for the
    /// quartile schemes.
    pub quartile_boundaries: Option<[f64; 3]>,
    pub quartile_degenerate: Option<bool>,
    pub estimates: Vec<DisparityEstimate>,
    #[serde(skip)]
    pub replicates: Vec<ReplicateDiagnostic>,
}

#[derive(Debug, Serialize)]
pub struct DisparitiesOutput {
    pub threshold: f64,
    pub precision: f64,
    pub false_omission_rate: f64,
    /// "estimated" (from labels) or "external" (supplied).
    pub error_model_source: String,
    pub residential_only: bool,
    pub total_detections: u64,
    pub duplicates_removed: u64,
    pub unassigned_detections: u64,
    pub cbgs_with_images: u64,
    /// CBGs dropped for having fewer than min_images_per_cbg images.
    pub cbgs_below_floor: u64,
    pub schemes: Vec<SchemeOutput>,
}

/// Estimate group-level deployment disparities from detections, census
/// populations, and CBG geometry. Writes disparities.csv (one row per
/// scheme/group) and disparities.json into `out_dir`.
pub fn cmd_disparities(paths: &RunPaths, options: &RunOptions) -> Result<DisparitiesOutput> {
    // Labels are loaded lazily: needed for auto-thresholding, for the
    // estimated error model, and for validation resampling in the
    // bootstrap. An explicit model plus fixed threshold runs without them.
    fn ensure_labels<'a>(
        labels: &'a mut Option<Vec<LabeledRecord>>,
        paths: &RunPaths,
        purpose: &str,
    ) -> Result<&'a [LabeledRecord]> {
        if labels.is_none() {
            *labels = Some(load_labels(paths, purpose)?);
        }
        Ok(labels.as_deref().unwrap())
    }
    let mut labels: Option<Vec<LabeledRecord>> = None;

    let threshold = match options.threshold {
        ThresholdSpec::Fixed(t) => resolve_threshold(ThresholdSpec::Fixed(t), None)?,
        ThresholdSpec::Auto => {
            let l = ensure_labels(&mut labels, paths, "threshold selection")?;
            resolve_threshold(ThresholdSpec::Auto, Some(l))?
        }
    };

    let error_model = match options.explicit_error_model {
        Some((precision, for_rate)) => {
            ClassifierErrorModel::external(threshold, precision, for_rate)?
        }
        None => {
            let l = ensure_labels(&mut labels, paths, "error-model estimation")?;
            estimate_error_model(l, threshold)?
        }
    };
    let error_model_source = if options.explicit_error_model.is_some() {
        "external"
    } else {
        "estimated"
    };

    if let Some(config) = &options.bootstrap {
        if config.resample_unit == crate::bootstrap::ResampleUnit::ImagesAndValidation {
            ensure_labels(&mut labels, paths, "validation resampling")?;
        }
    }

    let inputs = load_inputs(paths, options.window)?;
    let total_detections = inputs.detections.len() as u64;
    let (mut counts, unassigned) = inputs.index.assigned_counts(&inputs.detections, threshold);

    let before = counts.len();
    counts.retain(|_, &mut (n, _)| n >= options.min_images_per_cbg.max(1));
    let cbgs_below_floor = (before - counts.len()) as u64;
    let cbgs_with_images = counts.len() as u64;
    if counts.is_empty() {
        return Err(Error::Precondition(
            "no CBG has enough assigned images to estimate from".into(),
        ));
    }

    let (prevalences, _zero) = cbg_prevalence(&counts, &error_model)?;
    let zone_filter = options.residential_only.then_some(ZoneType::Residential);

    // Image-weighted attribute values for quartile boundaries: each CBG
    // contributes one value per analysis image.
    let image_cbg_ids: Vec<String> = counts
        .iter()
        .flat_map(|(id, &(n, _))| repeat_n(id.clone(), n as usize))
        .collect();

    let mut schemes = Vec::new();
    for spec in &options.schemes {
        let (scheme, boundaries, degenerate) = match spec {
            SchemeSpec::PopulationGroups => (
                GroupingScheme::from_population_columns("population_group", &inputs.cbgs),
                None,
                None,
            ),
            SchemeSpec::Borough => (
                GroupingScheme::from_attribute("borough", &inputs.cbgs, |c| c.borough.clone()),
                None,
                None,
            ),
            SchemeSpec::ZoneType => (
                GroupingScheme::from_attribute("zone_type", &inputs.cbgs, |c| {
                    c.zone_type.as_str().to_string()
                }),
                None,
                None,
            ),
            SchemeSpec::Neighborhood => (
                GroupingScheme::from_attribute("neighborhood", &inputs.cbgs, |c| {
                    c.neighborhood.clone()
                }),
                None,
                None,
            ),
            SchemeSpec::IncomeQuartile | SchemeSpec::DensityQuartile => {
                let attr = if *spec == SchemeSpec::IncomeQuartile {
                    QuartileAttribute::MedianIncome
                } else {
                    QuartileAttribute::PopDensity
                };
                let q = quartile_scheme(attr, &inputs.cbgs, &image_cbg_ids)?;
                (q.scheme, Some(q.boundaries), Some(q.degenerate))
            }
        };

        let (estimates, replicates) = match &options.bootstrap {
            Some(config) => {
                let outcome = bootstrap_disparities(
                    &counts,
                    &inputs.cbgs,
                    &error_model,
                    labels.as_deref(),
                    &scheme,
                    zone_filter,
                    config,
                )?;
                (outcome.estimates, outcome.diagnostics)
            }
            None => (
                relative_disparities(&scheme, &inputs.cbgs, &prevalences, zone_filter)?,
                Vec::new(),
            ),
        };
        schemes.push(SchemeOutput {
            scheme: scheme.name.clone(),
            quartile_boundaries: boundaries,
            quartile_degenerate: degenerate,
            estimates,
            replicates,
        });
    }

    let out = DisparitiesOutput {
        threshold,
        precision: error_model.precision,
        false_omission_rate: error_model.false_omission_rate,
        error_model_source: error_model_source.to_string(),
        residential_only: options.residential_only,
        total_detections,
        duplicates_removed: inputs.duplicates_removed,
        unassigned_detections: unassigned,
        cbgs_with_images,
        cbgs_below_floor,
        schemes,
    };

    std::fs::create_dir_all(&paths.out_dir).map_err(|e| Error::io(&paths.out_dir, e))?;
    let mut rows = Vec::new();
    for s in &out.schemes {
        rows.extend(report::disparity_rows(&s.scheme, &s.estimates));
    }
    report::write_disparities_csv(&paths.out_dir.join("disparities.csv"), &rows)?;
    report::write_json(&paths.out_dir.join("disparities.json"), &out)?;
    if options.dump_replicates {
        for s in &out.schemes {
            report::write_replicates_jsonl(
                &paths.out_dir.join(format!("replicates_{}.jsonl", s.scheme)),
                &s.replicates,
            )?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// coverage

#[derive(Debug, Serialize)]
pub struct CoverageOutput {
    #[serde(flatten)]
    pub report: CoverageReport,
    pub window: TimeWindow,
    pub hours_mode: HoursMode,
    /// Image counts by local day-of-week (Monday first) and hour.
    pub hour_day_counts: [[u64; 24]; 7],
}

/// Summarize spatial and temporal coverage of the detection set. Writes
/// coverage.json, cbg_counts.csv, hour_day_counts.csv, and assignments.csv
/// into `out_dir`.
pub fn cmd_coverage(paths: &RunPaths, options: &RunOptions) -> Result<CoverageOutput> {
    let inputs = load_inputs(paths, options.window)?;
    if inputs.detections.is_empty() {
        return Err(Error::Precondition(
            "no detections to report coverage for".into(),
        ));
    }
    let window = match options.window {
        Some(w) => w,
        None => {
            // Tightest hour-aligned window containing every record.
            let min = inputs.detections.iter().map(|r| r.timestamp).min().unwrap();
            let max = inputs.detections.iter().map(|r| r.timestamp).max().unwrap();
            TimeWindow {
                start: min.div_euclid(3600) * 3600,
                end: (max.div_euclid(3600) + 1) * 3600,
            }
        }
    };

    let assignments = inputs.index.assignment_map(&inputs.detections);
    let report_data = coverage_report(
        &inputs.detections,
        &assignments,
        &inputs.cbgs,
        window,
        inputs.duplicates_removed,
        options.hours_mode,
        options.utc_offset_secs,
    )?;

    let mut hour_day = [[0u64; 24]; 7];
    for rec in &inputs.detections {
        let day = local_day_of_week(rec.timestamp, options.utc_offset_secs) as usize;
        let hour = local_hour(rec.timestamp, options.utc_offset_secs) as usize;
        hour_day[day][hour] += 1;
    }

    let out = CoverageOutput {
        report: report_data,
        window,
        hours_mode: options.hours_mode,
        hour_day_counts: hour_day,
    };

    std::fs::create_dir_all(&paths.out_dir).map_err(|e| Error::io(&paths.out_dir, e))?;
    report::write_json(&paths.out_dir.join("coverage.json"), &out)?;
    report::write_cbg_counts_csv(&paths.out_dir.join("cbg_counts.csv"), &out.report)?;
    report::write_hour_day_csv(&paths.out_dir.join("hour_day_counts.csv"), &out.hour_day_counts)?;
    report::write_assignments_csv(&paths.out_dir.join("assignments.csv"), &assignments)?;
    Ok(out)
}
