//! deploystat: estimate group-level disparities in police-vehicle
//! deployment from geolocated classifier detections.
//!
//! Four subcommands drive the library pipeline:
//!   validate     classifier metrics + subgroup calibration audit
//!   disparities  census-reweighted, error-corrected group estimates
//!   coverage     spatial/temporal coverage of the detection set
//!   synth        generate a synthetic city with a known truth file
//!
//! Settings come from an optional TOML config (`--config`) with CLI flags
//! taking precedence. Exit codes: 0 success, 2 schema/usage errors,
//! 3 precondition violations, 4 runtime/bootstrap/IO errors.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use deploystat::bootstrap::{BootstrapConfig, ResampleUnit};
use deploystat::ingest::{HoursMode, TimeWindow, DEFAULT_UTC_OFFSET_SECS};
use deploystat::pipeline::{
    cmd_coverage, cmd_disparities, cmd_validate, RunOptions, RunPaths, SchemeSpec, ThresholdSpec,
};
use deploystat::synth::{generate, inject_miscalibration, CbgSelector, ScoreModel, WorldSpec};
use deploystat::Error;

#[derive(Parser)]
#[command(
    name = "deploystat",
    version,
    about = "Group-level disparity estimation from geolocated classifier detections",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the classifier on labeled data and audit subgroup calibration
    Validate(RunArgs),
    /// Estimate reweighted, error-corrected group disparities with bootstrap CIs
    Disparities(RunArgs),
    /// Report spatial and temporal coverage of the detection set
    Coverage(RunArgs),
    /// Generate a synthetic city (inputs + truth file) for testing
    Synth(SynthArgs),
}

// ---------------------------------------------------------------------------
// config file

/// TOML config shape. Every field is optional; CLI flags override whatever
/// the file sets, and built-in defaults fill the rest.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    inputs: FileInputs,
    #[serde(default)]
    analysis: FileAnalysis,
    #[serde(default)]
    bootstrap: FileBootstrap,
    #[serde(default)]
    output: FileOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileInputs {
    detections: Option<PathBuf>,
    labels: Option<PathBuf>,
    census: Option<PathBuf>,
    geometry: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileAnalysis {
    /// "auto" or a number in [0, 1].
    threshold: Option<toml::Value>,
    residential_only: Option<bool>,
    schemes: Option<Vec<String>>,
    min_images_per_cbg: Option<u64>,
    utc_offset_secs: Option<i64>,
    /// "calendar" or "hour_of_week".
    hours_mode: Option<String>,
    /// Supplying both precision and false_omission_rate switches the error
    /// model from label-estimated to external.
    precision: Option<f64>,
    false_omission_rate: Option<f64>,
    window_start: Option<i64>,
    window_end: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBootstrap {
    enabled: Option<bool>,
    replicates: Option<usize>,
    seed: Option<u64>,
    /// "images" or "images_and_validation".
    resample_unit: Option<String>,
    stratified_by_cbg: Option<bool>,
    dump_replicates: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileOutput {
    dir: Option<PathBuf>,
}

fn load_config(path: &PathBuf) -> Result<FileConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::schema(path, format!("config parse: {}", e)))
}

// ---------------------------------------------------------------------------
// shared run arguments (validate / disparities / coverage)

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HoursModeArg {
    Calendar,
    HourOfWeek,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ResampleUnitArg {
    Images,
    ImagesAndValidation,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config file; flags below override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Detections CSV or JSONL
    #[arg(long, value_name = "FILE")]
    detections: Option<PathBuf>,

    /// Labeled validation CSV or JSONL
    #[arg(long, value_name = "FILE")]
    labels: Option<PathBuf>,

    /// Census attributes CSV
    #[arg(long, value_name = "FILE")]
    census: Option<PathBuf>,

    /// CBG polygon GeoJSON
    #[arg(long, value_name = "FILE")]
    geometry: Option<PathBuf>,

    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Score threshold: "auto" (F1-max on labels) or a number in [0, 1]
    #[arg(long, value_name = "auto|NUM")]
    threshold: Option<String>,

    /// Restrict estimation (groups and city average) to residential CBGs
    #[arg(long)]
    residential_only: bool,

    /// Grouping scheme to run; repeatable. Default: population_group,
    /// borough, zone_type, income_quartile, density_quartile
    #[arg(long = "scheme", value_name = "NAME")]
    schemes: Vec<String>,

    /// Drop CBGs with fewer assigned images than this
    #[arg(long, value_name = "N")]
    min_images_per_cbg: Option<u64>,

    /// Fixed UTC offset for local-time flags (seconds)
    #[arg(long, value_name = "SECS")]
    utc_offset_secs: Option<i64>,

    /// How hours_covered counts hour slots
    #[arg(long, value_enum, value_name = "MODE")]
    hours_mode: Option<HoursModeArg>,

    /// Classifier precision at the threshold (with --for: external model)
    #[arg(long, value_name = "P")]
    precision: Option<f64>,

    /// Classifier false omission rate (with --precision: external model)
    #[arg(long = "for", value_name = "R")]
    false_omission_rate: Option<f64>,

    /// Bootstrap replicate count
    #[arg(long, value_name = "B")]
    replicates: Option<usize>,

    /// Bootstrap RNG seed
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,

    /// What the bootstrap resamples
    #[arg(long, value_enum, value_name = "UNIT")]
    resample_unit: Option<ResampleUnitArg>,

    /// Pool images across CBGs when resampling instead of stratifying
    #[arg(long)]
    pooled: bool,

    /// Skip the bootstrap: point estimates only
    #[arg(long)]
    no_bootstrap: bool,

    /// Write per-replicate diagnostics as JSONL
    #[arg(long)]
    dump_replicates: bool,

    /// Analysis window start (UTC seconds, inclusive)
    #[arg(long, value_name = "TS")]
    window_start: Option<i64>,

    /// Analysis window end (UTC seconds, exclusive)
    #[arg(long, value_name = "TS")]
    window_end: Option<i64>,
}

/// Paths + options after merging defaults, config file, and flags.
struct Resolved {
    paths: RunPaths,
    options: RunOptions,
}

fn parse_threshold(s: &str) -> Result<ThresholdSpec, Error> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(ThresholdSpec::Auto);
    }
    s.parse::<f64>()
        .map(ThresholdSpec::Fixed)
        .map_err(|_| Error::Precondition(format!("threshold {:?} is neither \"auto\" nor a number", s)))
}

fn parse_hours_mode(s: &str) -> Result<HoursMode, Error> {
    match s.to_ascii_lowercase().as_str() {
        "calendar" => Ok(HoursMode::Calendar),
        "hour_of_week" | "hour-of-week" => Ok(HoursMode::HourOfWeek),
        other => Err(Error::Precondition(format!(
            "hours_mode {:?} (expected calendar or hour_of_week)",
            other
        ))),
    }
}

fn parse_resample_unit(s: &str) -> Result<ResampleUnit, Error> {
    match s.to_ascii_lowercase().as_str() {
        "images" => Ok(ResampleUnit::Images),
        "images_and_validation" | "images-and-validation" => Ok(ResampleUnit::ImagesAndValidation),
        other => Err(Error::Precondition(format!(
            "resample_unit {:?} (expected images or images_and_validation)",
            other
        ))),
    }
}

impl RunArgs {
    /// Which inputs a subcommand actually reads, for early, actionable
    /// missing-path errors.
    fn resolve(&self, needs_detections: bool, needs_labels: bool) -> Result<Resolved, Error> {
        let file = match &self.config {
            Some(path) => load_config(path)?,
            None => FileConfig::default(),
        };

        let require = |flag: Option<&PathBuf>,
                       cfg: Option<&PathBuf>,
                       what: &str,
                       hint: &str|
         -> Result<PathBuf, Error> {
            flag.or(cfg).cloned().ok_or_else(|| {
                Error::Precondition(format!("no {} given (pass {} or set it in the config)", what, hint))
            })
        };

        let detections = if needs_detections {
            require(
                self.detections.as_ref(),
                file.inputs.detections.as_ref(),
                "detections file",
                "--detections",
            )?
        } else {
            self.detections
                .clone()
                .or(file.inputs.detections)
                .unwrap_or_default()
        };
        let census = require(
            self.census.as_ref(),
            file.inputs.census.as_ref(),
            "census file",
            "--census",
        )?;
        let geometry = require(
            self.geometry.as_ref(),
            file.inputs.geometry.as_ref(),
            "geometry file",
            "--geometry",
        )?;
        let labels = self.labels.clone().or(file.inputs.labels);
        if needs_labels && labels.is_none() {
            return Err(Error::Precondition(
                "no labels file given (pass --labels or set it in the config)".into(),
            ));
        }
        let out_dir = self
            .out
            .clone()
            .or(file.output.dir)
            .unwrap_or_else(|| PathBuf::from("out"));

        let threshold = match (&self.threshold, &file.analysis.threshold) {
            (Some(s), _) => parse_threshold(s)?,
            (None, Some(toml::Value::String(s))) => parse_threshold(s)?,
            (None, Some(toml::Value::Float(f))) => ThresholdSpec::Fixed(*f),
            (None, Some(toml::Value::Integer(i))) => ThresholdSpec::Fixed(*i as f64),
            (None, Some(other)) => {
                return Err(Error::Precondition(format!(
                    "config threshold {:?} is neither \"auto\" nor a number",
                    other
                )))
            }
            (None, None) => ThresholdSpec::Auto,
        };

        let scheme_names = if !self.schemes.is_empty() {
            Some(&self.schemes)
        } else {
            file.analysis.schemes.as_ref()
        };
        let schemes = match scheme_names {
            Some(names) => names
                .iter()
                .map(|n| SchemeSpec::parse(n).map_err(Error::Precondition))
                .collect::<Result<Vec<_>, _>>()?,
            None => SchemeSpec::DEFAULT.to_vec(),
        };

        let hours_mode = match self.hours_mode {
            Some(HoursModeArg::Calendar) => HoursMode::Calendar,
            Some(HoursModeArg::HourOfWeek) => HoursMode::HourOfWeek,
            None => match &file.analysis.hours_mode {
                Some(s) => parse_hours_mode(s)?,
                None => HoursMode::Calendar,
            },
        };

        let precision = self.precision.or(file.analysis.precision);
        let for_rate = self.false_omission_rate.or(file.analysis.false_omission_rate);
        let explicit_error_model = match (precision, for_rate) {
            (Some(p), Some(f)) => Some((p, f)),
            (None, None) => None,
            _ => {
                return Err(Error::Precondition(
                    "an external error model needs both --precision and --for".into(),
                ))
            }
        };

        let window = match (
            self.window_start.or(file.analysis.window_start),
            self.window_end.or(file.analysis.window_end),
        ) {
            (Some(start), Some(end)) => Some(TimeWindow { start, end }),
            (None, None) => None,
            _ => {
                return Err(Error::Precondition(
                    "a window needs both --window-start and --window-end".into(),
                ))
            }
        };

        let bootstrap = if self.no_bootstrap || file.bootstrap.enabled == Some(false) {
            None
        } else {
            let default = BootstrapConfig::default();
            let resample_unit = match self.resample_unit {
                Some(ResampleUnitArg::Images) => ResampleUnit::Images,
                Some(ResampleUnitArg::ImagesAndValidation) => ResampleUnit::ImagesAndValidation,
                None => match &file.bootstrap.resample_unit {
                    Some(s) => parse_resample_unit(s)?,
                    None => default.resample_unit,
                },
            };
            Some(BootstrapConfig {
                n_replicates: self
                    .replicates
                    .or(file.bootstrap.replicates)
                    .unwrap_or(default.n_replicates),
                seed: self.seed.or(file.bootstrap.seed).unwrap_or(default.seed),
                resample_unit,
                stratified_by_cbg: if self.pooled {
                    false
                } else {
                    file.bootstrap
                        .stratified_by_cbg
                        .unwrap_or(default.stratified_by_cbg)
                },
            })
        };

        let options = RunOptions {
            threshold,
            residential_only: self.residential_only
                || file.analysis.residential_only.unwrap_or(false),
            schemes,
            min_images_per_cbg: self
                .min_images_per_cbg
                .or(file.analysis.min_images_per_cbg)
                .unwrap_or(1),
            utc_offset_secs: self
                .utc_offset_secs
                .or(file.analysis.utc_offset_secs)
                .unwrap_or(DEFAULT_UTC_OFFSET_SECS),
            hours_mode,
            bootstrap,
            explicit_error_model,
            window,
            dump_replicates: self.dump_replicates || file.bootstrap.dump_replicates.unwrap_or(false),
        };

        Ok(Resolved {
            paths: RunPaths {
                detections,
                labels,
                census,
                geometry,
                out_dir,
            },
            options,
        })
    }
}

// ---------------------------------------------------------------------------
// synth arguments

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Flat rates, equal two-group populations
    Uniform,
    /// Linear rate/population/income/density gradients, mixed zoning
    GradientCity,
    /// Rates decay with distance from the grid center
    StationGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoreModelArg {
    /// Beta(8,2) positives vs Beta(2,8) negatives
    Beta,
    /// Exact precision/FOR confusion draws around a fixed threshold
    Confusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MiscalTarget {
    AboveMedianIncome,
    AboveMedianDensity,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// World preset to start from
    #[arg(long, value_enum, default_value_t = Preset::GradientCity)]
    preset: Preset,

    /// Grid rows (max 89)
    #[arg(long, default_value_t = 10)]
    rows: usize,

    /// Grid columns (max 179)
    #[arg(long, default_value_t = 10)]
    cols: usize,

    /// Images generated per CBG
    #[arg(long, default_value_t = 1000)]
    images_per_cbg: u64,

    /// Uniform preset's flat true rate
    #[arg(long, default_value_t = 0.1)]
    true_rate: f64,

    /// Labeled validation sample size
    #[arg(long, default_value_t = 2000)]
    validation: u64,

    /// World RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// How detection scores relate to true labels
    #[arg(long, value_enum, default_value_t = ScoreModelArg::Beta)]
    score_model: ScoreModelArg,

    /// Confusion score model: precision
    #[arg(long, default_value_t = 0.9)]
    precision: f64,

    /// Confusion score model: false omission rate
    #[arg(long = "for", default_value_t = 0.01)]
    false_omission_rate: f64,

    /// Confusion score model: threshold scores straddle
    #[arg(long, default_value_t = 0.77)]
    threshold: f64,

    /// Shift the confusion model by this delta on targeted CBGs
    #[arg(long, value_name = "DELTA")]
    miscalibrate: Option<f64>,

    /// Which CBGs the miscalibration hits
    #[arg(long, value_enum, requires = "miscalibrate")]
    miscalibrate_target: Option<MiscalTarget>,

    /// Miscalibrate explicit CBG indices (row-major); repeatable
    #[arg(long, value_name = "IDX", requires = "miscalibrate", conflicts_with = "miscalibrate_target")]
    miscalibrate_index: Vec<usize>,

    /// Output directory for the five world files
    #[arg(long, default_value = "world")]
    out: PathBuf,
}

fn run_synth(args: &SynthArgs) -> Result<(), Error> {
    let mut spec = match args.preset {
        Preset::Uniform => WorldSpec::uniform(
            args.rows,
            args.cols,
            args.images_per_cbg,
            args.true_rate,
            args.seed,
        ),
        Preset::GradientCity => {
            WorldSpec::gradient_city(args.rows, args.cols, args.images_per_cbg, args.seed)
        }
        Preset::StationGradient => {
            WorldSpec::station_gradient(args.rows, args.cols, args.images_per_cbg, args.seed)
        }
    };
    spec.n_validation = args.validation;
    if args.score_model == ScoreModelArg::Confusion {
        spec.score_model = ScoreModel::CalibratedConfusion {
            precision: args.precision,
            false_omission_rate: args.false_omission_rate,
            threshold: args.threshold,
        };
    }
    if let Some(delta) = args.miscalibrate {
        let selector = match (&args.miscalibrate_target, &args.miscalibrate_index) {
            (Some(MiscalTarget::AboveMedianIncome), _) => CbgSelector::AboveMedianIncome,
            (Some(MiscalTarget::AboveMedianDensity), _) => CbgSelector::AboveMedianDensity,
            (None, idx) if !idx.is_empty() => {
                CbgSelector::Indices(idx.iter().copied().collect::<BTreeSet<_>>())
            }
            (None, _) => CbgSelector::AboveMedianIncome,
        };
        spec = inject_miscalibration(&spec, &selector, delta)?;
    }

    let world = generate(&spec)?;
    world.write_files(&args.out)?;
    println!(
        "wrote world to {}: {} CBGs, {} detections, {} labeled validation records",
        args.out.display(),
        world.cbgs.len(),
        world.detections.len(),
        world.validation.len()
    );
    println!("files: census.csv, cbgs.geojson, detections.csv, labels.csv, truth.json");
    Ok(())
}

// ---------------------------------------------------------------------------
// run + report

fn run_validate(args: &RunArgs) -> Result<(), Error> {
    let r = args.resolve(false, true)?;
    let out = cmd_validate(&r.paths, &r.options)?;
    let m = &out.metrics;
    println!(
        "threshold {:.4}  precision {:.4}  recall {:.4}  AUC {:.4}  AP {:.4}  (n={}, positives={})",
        m.threshold, m.precision, m.recall, m.auc, m.average_precision, m.n, m.n_positive_labels
    );
    println!(
        "error model: precision {:.4}, false omission rate {:.4}",
        out.error_model.precision, out.error_model.false_omission_rate
    );
    if out.flagged_subgroups.is_empty() {
        println!("calibration audit: no flagged subgroups");
    } else {
        println!(
            "calibration audit: FLAGGED {}",
            out.flagged_subgroups.join(", ")
        );
    }
    for (name, reason) in &out.skipped_subgroup_metrics {
        println!("  (ranking metrics skipped for {}: {})", name, reason);
    }
    println!("wrote validate.json, metrics.csv, calibration.csv, subgroup_metrics.csv to {}", r.paths.out_dir.display());
    Ok(())
}

fn run_disparities(args: &RunArgs) -> Result<(), Error> {
    let r = args.resolve(true, false)?;
    let out = cmd_disparities(&r.paths, &r.options)?;
    println!(
        "threshold {:.4}  error model: precision {:.4} / FOR {:.4} ({})",
        out.threshold, out.precision, out.false_omission_rate, out.error_model_source
    );
    println!(
        "{} detections ({} duplicates removed, {} unassigned), {} CBGs in analysis ({} below floor)",
        out.total_detections,
        out.duplicates_removed,
        out.unassigned_detections,
        out.cbgs_with_images,
        out.cbgs_below_floor
    );
    for scheme in &out.schemes {
        println!("\n[{}]", scheme.scheme);
        if let (Some(b), Some(d)) = (scheme.quartile_boundaries, scheme.quartile_degenerate) {
            println!(
                "  boundaries: {:.2} / {:.2} / {:.2}{}",
                b[0],
                b[1],
                b[2],
                if d { "  (degenerate)" } else { "" }
            );
        }
        for e in &scheme.estimates {
            let ci = match e.ci_half_width {
                Some(hw) => format!(" ± {:.3}", hw),
                None => String::new(),
            };
            println!(
                "  {:<24} {:>7.3}x{}  (rate {:.5}, {} CBGs, pop {:.0})",
                e.group_value, e.relative_rate, ci, e.absolute_rate, e.n_cbgs, e.population
            );
        }
    }
    println!("\nwrote disparities.csv and disparities.json to {}", r.paths.out_dir.display());
    Ok(())
}

fn run_coverage(args: &RunArgs) -> Result<(), Error> {
    let r = args.resolve(true, false)?;
    let out = cmd_coverage(&r.paths, &r.options)?;
    let rep = &out.report;
    println!(
        "{} records ({} duplicates removed, {} unassigned)",
        rep.total_records, rep.duplicates_removed, rep.unassigned_records
    );
    println!(
        "CBGs with images: {} ({:.1}%), mean {:.1} images/CBG",
        rep.cbgs_with_images,
        100.0 * rep.cbgs_with_images_fraction,
        rep.mean_images_per_cbg
    );
    println!(
        "hours covered: {:.1}% of window [{}, {})",
        100.0 * rep.hours_covered,
        out.window.start,
        out.window.end
    );
    println!("wrote coverage.json, cbg_counts.csv, hour_day_counts.csv, assignments.csv to {}", r.paths.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate(args) => run_validate(args),
        Command::Disparities(args) => run_disparities(args),
        Command::Coverage(args) => run_coverage(args),
        Command::Synth(args) => run_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
