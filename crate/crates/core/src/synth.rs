//! Synthetic city generator with analytically known ground truth.
//!
//! A world is a rows x cols grid of unit-square CBGs (cell (r, c) spans
//! longitude [c, c+1] and latitude [r, r+1]), each with configurable group
//! populations, a true detection rate, an image budget, and census
//! attributes. Generation is single-threaded and fully determined by the
//! spec's seed.
//!
//! Two score models:
//! - `BetaMixture`: labels are Bernoulli(true_rate), scores Beta(pos) for
//!   positives and Beta(neg) for negatives. Realistic overlapping score
//!   distributions; the implied precision/FOR depend on the threshold.
//! - `CalibratedConfusion`: fixes precision and false omission rate exactly.
//!   Predictions are drawn Bernoulli(q_c) with q_c chosen so that
//!   q_c * precision + (1 - q_c) * FOR = true_rate, labels are drawn from
//!   the stated precision/FOR given the prediction, and scores land
//!   uniformly above/below the threshold to match the prediction. The
//!   misclassification correction is exact in expectation by construction,
//!   which is what estimator-recovery and calibration-audit tests need.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::MultiPolygon;
use crate::ingest::{
    CensusBlockGroup, DetectionRecord, LabeledRecord, TimeWindow, ZoneType,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScoreModel {
    BetaMixture {
        pos_alpha: f64,
        pos_beta: f64,
        neg_alpha: f64,
        neg_beta: f64,
    },
    CalibratedConfusion {
        precision: f64,
        false_omission_rate: f64,
        threshold: f64,
    },
}

impl Default for ScoreModel {
    fn default() -> Self {
        ScoreModel::BetaMixture {
            pos_alpha: 8.0,
            pos_beta: 2.0,
            neg_alpha: 2.0,
            neg_beta: 8.0,
        }
    }
}

/// Which CBGs a miscalibration injection hits.
#[derive(Debug, Clone)]
pub enum CbgSelector {
    AboveMedianIncome,
    AboveMedianDensity,
    Indices(BTreeSet<usize>),
}

/// A per-CBG shift of the confusion model: matched CBGs run at
/// (precision - delta, FOR + delta) while true rates stay put.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Miscalibration {
    pub cbg_indices: BTreeSet<usize>,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Population group names (a `total` column is derived, never listed).
    pub groups: Vec<String>,
    /// Per-CBG population by group, row-major cell order.
    pub populations: Vec<BTreeMap<String, f64>>,
    pub true_rates: Vec<f64>,
    pub images_per_cbg: Vec<u64>,
    pub median_incomes: Vec<Option<f64>>,
    pub pop_densities: Vec<f64>,
    pub zone_types: Vec<ZoneType>,
    pub boroughs: Vec<String>,
    pub neighborhoods: Vec<String>,
    pub score_model: ScoreModel,
    pub miscalibration: Option<Miscalibration>,
    /// Size of the independently drawn labeled validation sample.
    pub n_validation: u64,
    pub window: TimeWindow,
    pub seed: u64,
}

impl WorldSpec {
    pub fn n_cbgs(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn cbg_id(row: usize, col: usize) -> String {
        format!("cbg-{:03}-{:03}", row, col)
    }

    /// Uniform world: every CBG has the same rate, image budget, and two
    /// equal-population groups. Incomes and densities ramp with cell index
    /// so medians and quartiles are well defined.
    pub fn uniform(
        grid_rows: usize,
        grid_cols: usize,
        images_per_cbg: u64,
        true_rate: f64,
        seed: u64,
    ) -> WorldSpec {
        let n = grid_rows * grid_cols;
        let start = 1_699_999_200; // hour-aligned
        WorldSpec {
            grid_rows,
            grid_cols,
            groups: vec!["ga".to_string(), "gb".to_string()],
            populations: (0..n)
                .map(|_| {
                    BTreeMap::from([
                        ("ga".to_string(), 100.0),
                        ("gb".to_string(), 100.0),
                    ])
                })
                .collect(),
            true_rates: vec![true_rate; n],
            images_per_cbg: vec![images_per_cbg; n],
            median_incomes: (0..n).map(|i| Some(40_000.0 + 1_000.0 * i as f64)).collect(),
            pop_densities: (0..n).map(|i| 5_000.0 + 100.0 * i as f64).collect(),
            zone_types: vec![ZoneType::Residential; n],
            boroughs: (0..n)
                .map(|i| {
                    if i / grid_cols < grid_rows.div_ceil(2) {
                        "north".to_string()
                    } else {
                        "south".to_string()
                    }
                })
                .collect(),
            neighborhoods: (0..n)
                .map(|i| format!("nbhd-{:02}", i / grid_cols))
                .collect(),
            score_model: ScoreModel::default(),
            miscalibration: None,
            n_validation: 2_000,
            window: TimeWindow {
                start,
                end: start + 14 * 86_400,
            },
            seed,
        }
    }

    /// A city with structure: true rates climb linearly across cells, group
    /// `ga` lives disproportionately where rates are high and `gb` where
    /// they are low, incomes fall and densities rise along the same
    /// gradient, and a quarter of columns are zoned commercial.
    pub fn gradient_city(
        grid_rows: usize,
        grid_cols: usize,
        images_per_cbg: u64,
        seed: u64,
    ) -> WorldSpec {
        let n = grid_rows * grid_cols;
        let mut spec = WorldSpec::uniform(grid_rows, grid_cols, images_per_cbg, 0.1, seed);
        let frac = |i: usize| {
            if n == 1 {
                0.0
            } else {
                i as f64 / (n - 1) as f64
            }
        };
        spec.true_rates = (0..n).map(|i| 0.05 + 0.25 * frac(i)).collect();
        spec.populations = (0..n)
            .map(|i| {
                BTreeMap::from([
                    ("ga".to_string(), 25.0 + 150.0 * frac(i)),
                    ("gb".to_string(), 25.0 + 150.0 * (1.0 - frac(i))),
                ])
            })
            .collect();
        spec.median_incomes = (0..n)
            .map(|i| Some(80_000.0 - 40_000.0 * frac(i)))
            .collect();
        spec.pop_densities = (0..n).map(|i| 2_000.0 + 8_000.0 * frac(i)).collect();
        spec.zone_types = (0..n)
            .map(|i| {
                if (i % grid_cols).is_multiple_of(4) {
                    ZoneType::Commercial
                } else {
                    ZoneType::Residential
                }
            })
            .collect();
        spec.boroughs = (0..n)
            .map(|i| {
                let band = (i % grid_cols) * 3 / grid_cols.max(1);
                ["west", "center", "east"][band.min(2)].to_string()
            })
            .collect();
        spec.neighborhoods = (0..n)
            .map(|i| format!("nbhd-{:02}-{:02}", (i / grid_cols) / 2, (i % grid_cols) / 2))
            .collect();
        spec
    }

    /// True rates decay with distance from the grid center ("the station"):
    /// rate = 0.02 + 0.28 * exp(-3 * normalized distance).
    pub fn station_gradient(
        grid_rows: usize,
        grid_cols: usize,
        images_per_cbg: u64,
        seed: u64,
    ) -> WorldSpec {
        let mut spec = WorldSpec::uniform(grid_rows, grid_cols, images_per_cbg, 0.1, seed);
        let dists = center_distances(grid_rows, grid_cols);
        spec.true_rates = dists
            .iter()
            .map(|&d| 0.02 + 0.28 * (-3.0 * d).exp())
            .collect();
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_cbgs();
        if n == 0 {
            return Err(Error::Precondition("world grid is empty".into()));
        }
        if self.grid_rows > 89 {
            return Err(Error::Precondition(
                "grid_rows > 89 would push latitudes outside [-90, 90]".into(),
            ));
        }
        if self.grid_cols > 179 {
            return Err(Error::Precondition(
                "grid_cols > 179 would push longitudes outside [-180, 180]".into(),
            ));
        }
        let lens = [
            ("populations", self.populations.len()),
            ("true_rates", self.true_rates.len()),
            ("images_per_cbg", self.images_per_cbg.len()),
            ("median_incomes", self.median_incomes.len()),
            ("pop_densities", self.pop_densities.len()),
            ("zone_types", self.zone_types.len()),
            ("boroughs", self.boroughs.len()),
            ("neighborhoods", self.neighborhoods.len()),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(Error::Precondition(format!(
                    "spec dimension mismatch: {} has {} entries for {} CBGs",
                    name, len, n
                )));
            }
        }
        if self.groups.is_empty() {
            return Err(Error::Precondition("spec lists no population groups".into()));
        }
        if self.groups.iter().any(|g| g == "total") {
            return Err(Error::Precondition(
                "group name \"total\" is reserved for the derived total column".into(),
            ));
        }
        // pop_density is a fixed census column; a group named "density"
        // would collide with it on the CSV round trip.
        if self.groups.iter().any(|g| g == "density") {
            return Err(Error::Precondition(
                "group name \"density\" collides with the pop_density column".into(),
            ));
        }
        for (i, rate) in self.true_rates.iter().enumerate() {
            if !rate.is_finite() || !(0.0..=1.0).contains(rate) {
                return Err(Error::Precondition(format!(
                    "true rate {} at cbg {} outside [0, 1]",
                    rate, i
                )));
            }
        }
        for pops in &self.populations {
            for (g, v) in pops {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::Precondition(format!(
                        "population {} for group {:?} must be nonnegative",
                        v, g
                    )));
                }
            }
        }
        if self.window.end <= self.window.start {
            return Err(Error::Precondition("empty time window".into()));
        }
        match &self.score_model {
            ScoreModel::BetaMixture {
                pos_alpha,
                pos_beta,
                neg_alpha,
                neg_beta,
            } => {
                for (name, v) in [
                    ("pos_alpha", pos_alpha),
                    ("pos_beta", pos_beta),
                    ("neg_alpha", neg_alpha),
                    ("neg_beta", neg_beta),
                ] {
                    if !v.is_finite() || *v <= 0.0 {
                        return Err(Error::Precondition(format!(
                            "beta parameter {} must be positive (got {})",
                            name, v
                        )));
                    }
                }
                if self.miscalibration.as_ref().is_some_and(|m| {
                    m.delta != 0.0 && !m.cbg_indices.is_empty()
                }) {
                    return Err(Error::Precondition(
                        "miscalibration requires the calibrated-confusion score model".into(),
                    ));
                }
            }
            ScoreModel::CalibratedConfusion { threshold, .. } => {
                if !threshold.is_finite() || !(0.0 < *threshold && *threshold < 1.0) {
                    return Err(Error::Precondition(format!(
                        "confusion threshold {} outside (0, 1)",
                        threshold
                    )));
                }
                for i in 0..n {
                    // Also checks parameter ranges per CBG.
                    self.confusion_at(i)?;
                }
            }
        }
        if let Some(m) = &self.miscalibration {
            if let Some(&bad) = m.cbg_indices.iter().find(|&&i| i >= n) {
                return Err(Error::Precondition(format!(
                    "miscalibration index {} out of range ({} CBGs)",
                    bad, n
                )));
            }
        }
        Ok(())
    }

    /// Effective (precision, FOR, q) for a CBG under the confusion model,
    /// after any miscalibration shift.
    fn confusion_at(&self, idx: usize) -> Result<(f64, f64, f64)> {
        let ScoreModel::CalibratedConfusion {
            precision,
            false_omission_rate,
            ..
        } = &self.score_model
        else {
            return Err(Error::Precondition(
                "confusion_at called for a non-confusion score model".into(),
            ));
        };
        let shifted = self
            .miscalibration
            .as_ref()
            .is_some_and(|m| m.delta != 0.0 && m.cbg_indices.contains(&idx));
        let delta = self.miscalibration.as_ref().map_or(0.0, |m| m.delta);
        let (prec, fo) = if shifted {
            (precision - delta, false_omission_rate + delta)
        } else {
            (*precision, *false_omission_rate)
        };
        if !(0.0..=1.0).contains(&prec) || !(0.0..=1.0).contains(&fo) || fo >= prec {
            return Err(Error::Precondition(format!(
                "cbg {}: confusion parameters (precision {}, FOR {}) must satisfy 0 <= FOR < precision <= 1",
                idx, prec, fo
            )));
        }
        let rate = self.true_rates[idx];
        let q = (rate - fo) / (prec - fo);
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Precondition(format!(
                "cbg {}: true rate {} outside the attainable range [{}, {}] of the confusion model",
                idx, rate, fo, prec
            )));
        }
        Ok((prec, fo, q))
    }
}

/// Normalized distance of each cell center from the grid center, row-major;
/// the most distant cell is at 1.
pub fn center_distances(grid_rows: usize, grid_cols: usize) -> Vec<f64> {
    let cy = (grid_rows as f64 - 1.0) / 2.0;
    let cx = (grid_cols as f64 - 1.0) / 2.0;
    let mut dists = Vec::with_capacity(grid_rows * grid_cols);
    for r in 0..grid_rows {
        for c in 0..grid_cols {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            dists.push((dx * dx + dy * dy).sqrt());
        }
    }
    let max = dists.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
    for d in &mut dists {
        *d /= max;
    }
    dists
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthEntry {
    pub group: String,
    pub absolute: f64,
    pub relative: f64,
}

/// Analytic ground truth written beside the generated files: true per-CBG
/// rates and the implied group disparities under exact reweighting (all
/// CBGs, no zone filter).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldTruth {
    pub city_average: f64,
    pub per_cbg_rate: BTreeMap<String, f64>,
    pub schemes: BTreeMap<String, Vec<TruthEntry>>,
}

impl WorldTruth {
    pub fn entry(&self, scheme: &str, group: &str) -> Option<&TruthEntry> {
        self.schemes
            .get(scheme)?
            .iter()
            .find(|e| e.group == group)
    }
}

#[derive(Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub cbgs: Vec<CensusBlockGroup>,
    pub detections: Vec<DetectionRecord>,
    /// True label of each detection (generator-side knowledge).
    pub detection_labels: Vec<bool>,
    /// Generating CBG of each detection, as an index into `cbgs` order
    /// below — note `cbgs` is sorted by cbg_id, which equals row-major
    /// order for the zero-padded grid ids.
    pub detection_cbg: Vec<u32>,
    pub validation: Vec<LabeledRecord>,
    pub truth: WorldTruth,
}

impl World {
    /// Per-CBG (n_images, n_predicted_positive) using the generator's own
    /// image-to-CBG mapping (no spatial assignment involved).
    pub fn analysis_counts(&self, threshold: f64) -> BTreeMap<String, (u64, u64)> {
        let mut counts: BTreeMap<String, (u64, u64)> = self
            .cbgs
            .iter()
            .map(|c| (c.cbg_id.clone(), (0, 0)))
            .collect();
        for (rec, &idx) in self.detections.iter().zip(&self.detection_cbg) {
            let entry = counts.get_mut(&self.cbgs[idx as usize].cbg_id).unwrap();
            entry.0 += 1;
            if rec.score >= threshold {
                entry.1 += 1;
            }
        }
        counts
    }

    /// Analysis detections with their true labels attached, for identity
    /// checks that need labeled analysis data.
    pub fn labeled_analysis(&self) -> Vec<LabeledRecord> {
        self.detections
            .iter()
            .zip(&self.detection_labels)
            .map(|(d, &label)| LabeledRecord {
                detection: d.clone(),
                label,
            })
            .collect()
    }

    /// Write the five input files the pipeline consumes: census.csv,
    /// cbgs.geojson, detections.csv, labels.csv, truth.json.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::ingest::write_census_csv(&dir.join("census.csv"), &self.cbgs)?;
        crate::ingest::write_geojson(&dir.join("cbgs.geojson"), &self.cbgs)?;
        crate::ingest::write_detections_csv(&dir.join("detections.csv"), &self.detections)?;
        crate::ingest::write_labeled_csv(&dir.join("labels.csv"), &self.validation)?;
        let truth_path = dir.join("truth.json");
        let file = File::create(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &self.truth)
            .map_err(|e| Error::Runtime(format!("writing truth.json: {}", e)))
    }
}

struct Sampler<'a> {
    spec: &'a WorldSpec,
    beta_pos: Option<Beta<f64>>,
    beta_neg: Option<Beta<f64>>,
    /// Per-CBG (precision, FOR, q) under the confusion model.
    confusion: Vec<(f64, f64, f64)>,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a WorldSpec) -> Result<Self> {
        let (beta_pos, beta_neg, confusion) = match &spec.score_model {
            ScoreModel::BetaMixture {
                pos_alpha,
                pos_beta,
                neg_alpha,
                neg_beta,
            } => {
                let mk = |a: f64, b: f64| {
                    Beta::new(a, b).map_err(|e| Error::Runtime(format!("beta({}, {}): {}", a, b, e)))
                };
                (Some(mk(*pos_alpha, *pos_beta)?), Some(mk(*neg_alpha, *neg_beta)?), Vec::new())
            }
            ScoreModel::CalibratedConfusion { .. } => {
                let confusion = (0..spec.n_cbgs())
                    .map(|i| spec.confusion_at(i))
                    .collect::<Result<Vec<_>>>()?;
                (None, None, confusion)
            }
        };
        Ok(Sampler {
            spec,
            beta_pos,
            beta_neg,
            confusion,
        })
    }

    /// Draw (score, label) for one image in the given CBG.
    fn draw(&self, rng: &mut ChaCha8Rng, cbg_idx: usize) -> (f64, bool) {
        match &self.spec.score_model {
            ScoreModel::BetaMixture { .. } => {
                let label = rng.random_bool(self.spec.true_rates[cbg_idx]);
                let dist = if label {
                    self.beta_pos.as_ref().unwrap()
                } else {
                    self.beta_neg.as_ref().unwrap()
                };
                (dist.sample(rng).clamp(0.0, 1.0), label)
            }
            ScoreModel::CalibratedConfusion { threshold, .. } => {
                let (prec, fo, q) = self.confusion[cbg_idx];
                let pred = rng.random_bool(q);
                let label = rng.random_bool(if pred { prec } else { fo });
                let u: f64 = rng.random();
                let score = if pred {
                    threshold + u * (1.0 - threshold)
                } else {
                    u * threshold
                };
                (score, label)
            }
        }
    }
}

/// Generate a world from its spec. Deterministic in the seed; generation is
/// single-threaded by design so the record stream is reproducible.
pub fn generate(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let n = spec.n_cbgs();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sampler = Sampler::new(spec)?;

    // Census + geometry. Row-major construction matches sorted cbg_id order
    // because ids zero-pad row and column.
    let mut cbgs = Vec::with_capacity(n);
    for r in 0..spec.grid_rows {
        for c in 0..spec.grid_cols {
            let i = r * spec.grid_cols + c;
            let mut populations = spec.populations[i].clone();
            let total: f64 = spec.groups.iter().filter_map(|g| populations.get(g)).sum();
            populations.insert("total".to_string(), total);
            cbgs.push(CensusBlockGroup {
                cbg_id: WorldSpec::cbg_id(r, c),
                geometry: MultiPolygon::rect(c as f64, r as f64, (c + 1) as f64, (r + 1) as f64),
                populations,
                median_income: spec.median_incomes[i],
                pop_density: spec.pop_densities[i],
                zone_type: spec.zone_types[i],
                borough: spec.boroughs[i].clone(),
                neighborhood: spec.neighborhoods[i].clone(),
            });
        }
    }

    let window_len = (spec.window.end - spec.window.start) as u64;
    let total_images: u64 = spec.images_per_cbg.iter().sum();
    let mut detections = Vec::with_capacity(total_images as usize);
    let mut detection_labels = Vec::with_capacity(total_images as usize);
    let mut detection_cbg = Vec::with_capacity(total_images as usize);
    let mut serial = 0u64;
    // Keep points strictly interior so assignment never depends on the
    // shared-edge tie-break.
    const MARGIN: f64 = 1e-6;
    for r in 0..spec.grid_rows {
        for c in 0..spec.grid_cols {
            let i = r * spec.grid_cols + c;
            for _ in 0..spec.images_per_cbg[i] {
                let lat = r as f64 + MARGIN + rng.random::<f64>() * (1.0 - 2.0 * MARGIN);
                let lng = c as f64 + MARGIN + rng.random::<f64>() * (1.0 - 2.0 * MARGIN);
                let timestamp = spec.window.start + rng.random_range(0..window_len) as i64;
                let (score, label) = sampler.draw(&mut rng, i);
                detections.push(DetectionRecord {
                    image_id: format!("img-{:08}", serial),
                    lat,
                    lng,
                    timestamp,
                    score,
                });
                detection_labels.push(label);
                detection_cbg.push(i as u32);
                serial += 1;
            }
        }
    }

    // Validation sample: CBG chosen proportionally to image budgets (the
    // same sampling distribution as the analysis set), then the same
    // generative draw. Independent of the analysis images.
    let mut validation = Vec::with_capacity(spec.n_validation as usize);
    if spec.n_validation > 0 {
        if total_images == 0 {
            return Err(Error::Precondition(
                "cannot draw a validation sample from a world with no images".into(),
            ));
        }
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0u64;
        for &m in &spec.images_per_cbg {
            acc += m;
            cumulative.push(acc);
        }
        for v in 0..spec.n_validation {
            let pick = rng.random_range(0..total_images);
            let i = cumulative.partition_point(|&cum| cum <= pick);
            let r = i / spec.grid_cols;
            let c = i % spec.grid_cols;
            let lat = r as f64 + MARGIN + rng.random::<f64>() * (1.0 - 2.0 * MARGIN);
            let lng = c as f64 + MARGIN + rng.random::<f64>() * (1.0 - 2.0 * MARGIN);
            let timestamp = spec.window.start + rng.random_range(0..window_len) as i64;
            let (score, label) = sampler.draw(&mut rng, i);
            validation.push(LabeledRecord {
                detection: DetectionRecord {
                    image_id: format!("val-{:08}", v),
                    lat,
                    lng,
                    timestamp,
                    score,
                },
                label,
            });
        }
    }

    let truth = compute_truth(spec, &cbgs)?;
    Ok(World {
        spec: spec.clone(),
        cbgs,
        detections,
        detection_labels,
        detection_cbg,
        validation,
        truth,
    })
}

/// Exact reweighted group rates implied by the spec: for group a,
/// sum_c N_ca * r_c / sum_c N_ca over all CBGs, with relative rates against
/// the total-population city average.
fn compute_truth(spec: &WorldSpec, cbgs: &[CensusBlockGroup]) -> Result<WorldTruth> {
    let n = spec.n_cbgs();
    let per_cbg_rate: BTreeMap<String, f64> = cbgs
        .iter()
        .enumerate()
        .map(|(i, c)| (c.cbg_id.clone(), spec.true_rates[i]))
        .collect();

    let weighted = |weight_of: &dyn Fn(usize) -> f64| -> Option<f64> {
        let mut wsum = 0.0;
        let mut acc = 0.0;
        for i in 0..n {
            let w = weight_of(i);
            wsum += w;
            acc += w * spec.true_rates[i];
        }
        (wsum > 0.0).then(|| acc / wsum)
    };

    let total_of = |i: usize| -> f64 {
        spec.groups
            .iter()
            .filter_map(|g| spec.populations[i].get(g))
            .sum()
    };
    let city_average = weighted(&|i| total_of(i)).ok_or_else(|| {
        Error::Precondition("world has zero total population; truth is undefined".into())
    })?;
    if city_average <= 0.0 {
        return Err(Error::Precondition(
            "city average true rate is zero; relative truth is undefined".into(),
        ));
    }

    let mut schemes: BTreeMap<String, Vec<TruthEntry>> = BTreeMap::new();

    let mut group_entries = Vec::new();
    for g in &spec.groups {
        let abs = weighted(&|i| spec.populations[i].get(g).copied().unwrap_or(0.0));
        if let Some(absolute) = abs {
            group_entries.push(TruthEntry {
                group: g.clone(),
                absolute,
                relative: absolute / city_average,
            });
        }
    }
    schemes.insert("population_group".to_string(), group_entries);

    let attr_scheme = |values: &dyn Fn(usize) -> String| -> Vec<TruthEntry> {
        let distinct: BTreeSet<String> = (0..n).map(values).collect();
        distinct
            .into_iter()
            .filter_map(|v| {
                let abs = weighted(&|i| if values(i) == v { total_of(i) } else { 0.0 })?;
                Some(TruthEntry {
                    group: v,
                    absolute: abs,
                    relative: abs / city_average,
                })
            })
            .collect()
    };
    schemes.insert(
        "borough".to_string(),
        attr_scheme(&|i| spec.boroughs[i].clone()),
    );
    schemes.insert(
        "zone_type".to_string(),
        attr_scheme(&|i| spec.zone_types[i].as_str().to_string()),
    );

    Ok(WorldTruth {
        city_average,
        per_cbg_rate,
        schemes,
    })
}

/// Return a copy of `spec` with a miscalibration injected: selected CBGs
/// run at (precision - delta, FOR + delta) while true rates stay unchanged.
/// delta = 0 or an empty selection is the identity. Nonzero injection
/// requires the calibrated-confusion score model and parameters that stay
/// in range for every matched CBG.
pub fn inject_miscalibration(
    spec: &WorldSpec,
    selector: &CbgSelector,
    delta: f64,
) -> Result<WorldSpec> {
    if !delta.is_finite() {
        return Err(Error::Precondition(format!(
            "miscalibration delta {} is not finite",
            delta
        )));
    }
    let mut out = spec.clone();
    if delta == 0.0 {
        return Ok(out);
    }
    let indices = resolve_selector(spec, selector)?;
    if indices.is_empty() {
        return Ok(out);
    }
    if !matches!(spec.score_model, ScoreModel::CalibratedConfusion { .. }) {
        return Err(Error::Precondition(
            "miscalibration requires the calibrated-confusion score model".into(),
        ));
    }
    out.miscalibration = Some(Miscalibration {
        cbg_indices: indices,
        delta,
    });
    // Validates shifted parameters and attainable-range per matched CBG.
    out.validate()?;
    Ok(out)
}

fn resolve_selector(spec: &WorldSpec, selector: &CbgSelector) -> Result<BTreeSet<usize>> {
    let n = spec.n_cbgs();
    match selector {
        CbgSelector::Indices(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Precondition(format!(
                    "selector index {} out of range ({} CBGs)",
                    bad, n
                )));
            }
            Ok(idx.clone())
        }
        CbgSelector::AboveMedianIncome => {
            let values: Vec<f64> = spec
                .median_incomes
                .iter()
                .filter_map(|v| *v)
                .collect();
            if values.is_empty() {
                return Err(Error::Precondition(
                    "no CBG has a median income; selector matches nothing".into(),
                ));
            }
            let median = median_of(values);
            Ok((0..n)
                .filter(|&i| spec.median_incomes[i].is_some_and(|v| v > median))
                .collect())
        }
        CbgSelector::AboveMedianDensity => {
            let median = median_of(spec.pop_densities.clone());
            Ok((0..n)
                .filter(|&i| spec.pop_densities[i] > median)
                .collect())
        }
    }
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    crate::estimator::nearest_rank(&values, 0.5)
}
