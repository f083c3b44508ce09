//! Bootstrap uncertainty for disparity estimates.
//!
//! Each replicate resamples the analysis images (and optionally the labeled
//! validation set), reruns correction and reweighting end to end, and the
//! half-width reported is 1.96 times the standard deviation of each group's
//! statistic across replicates.
//!
//! Determinism contract: replicate r draws from ChaCha8 seeded with the
//! configured seed on stream r. Streams are independent of scheduling, so
//! results are bit-identical for a given (seed, n_replicates) regardless of
//! thread count.
//!
//! Resampling works on sufficient statistics rather than record lists: a
//! CBG's contribution to every downstream statistic depends on its sample
//! only through (n_images, n_predicted_positive), so resampling n_c records
//! with replacement within a CBG is distributionally identical to drawing
//! k' ~ Binomial(n_c, k_c/n_c) — and far cheaper. Pooled (non-stratified)
//! resampling draws the full 2C-cell multinomial via sequential conditional
//! binomials.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{cbg_prevalence, relative_disparities, DisparityEstimate, GroupingScheme};
use crate::eval::{estimate_error_model, ClassifierErrorModel, Z_95};
use crate::ingest::{CensusBlockGroup, LabeledRecord, ZoneType};

/// What a replicate resamples: analysis images alone, or images plus the
/// labeled validation set (propagating error-model uncertainty too).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleUnit {
    #[default]
    Images,
    ImagesAndValidation,
}

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub n_replicates: usize,
    pub seed: u64,
    pub resample_unit: ResampleUnit,
    /// Resample within each CBG (preserving per-CBG counts) rather than
    /// pooling all images.
    pub stratified_by_cbg: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_replicates: 1000,
            seed: 0,
            resample_unit: ResampleUnit::Images,
            stratified_by_cbg: true,
        }
    }
}

/// Per-replicate outcome kept for diagnostics: group values aligned with
/// the estimate rows, or the error text for failed replicates.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateDiagnostic {
    pub replicate: usize,
    pub ok: bool,
    /// (absolute_rate, relative_rate) per group, in row order.
    pub values: Option<Vec<(f64, f64)>>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct BootstrapOutcome {
    /// Point estimates from the original sample, half-widths filled in.
    pub estimates: Vec<DisparityEstimate>,
    pub n_failed: usize,
    pub diagnostics: Vec<ReplicateDiagnostic>,
}

/// Fraction of replicates allowed to fail before the whole bootstrap errors.
const MAX_FAILED_FRACTION: f64 = 0.01;

struct ValidationCells {
    tp: u64,
    fp: u64,
    fn_: u64,
    tn: u64,
}

/// Bootstrap the full disparity table for one grouping scheme.
///
/// `counts` holds per-CBG (n_images, n_predicted_positive) at the error
/// model's threshold. `validation` is required when `resample_unit`
/// includes the validation set; the error model is then re-estimated per
/// replicate from the resampled confusion counts.
pub fn bootstrap_disparities(
    counts: &BTreeMap<String, (u64, u64)>,
    cbgs: &[CensusBlockGroup],
    error_model: &ClassifierErrorModel,
    validation: Option<&[LabeledRecord]>,
    scheme: &GroupingScheme,
    zone_filter: Option<ZoneType>,
    config: &BootstrapConfig,
) -> Result<BootstrapOutcome> {
    if config.n_replicates < 2 {
        return Err(Error::Precondition(format!(
            "bootstrap needs at least 2 replicates (got {})",
            config.n_replicates
        )));
    }
    let validation_cells = match config.resample_unit {
        ResampleUnit::Images => None,
        ResampleUnit::ImagesAndValidation => {
            let records = validation.ok_or_else(|| {
                Error::Precondition(
                    "resampling the validation set requires labeled validation records".into(),
                )
            })?;
            let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for r in records {
                match (r.detection.score >= error_model.threshold, r.label) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            Some(ValidationCells { tp, fp, fn_, tn })
        }
    };

    // Point estimates from the original sample define the group order.
    let (prevalences, _) = cbg_prevalence(counts, error_model)?;
    let mut estimates = relative_disparities(scheme, cbgs, &prevalences, zone_filter)?;
    let group_order: Vec<String> = estimates.iter().map(|e| e.group_value.clone()).collect();

    // Flattened counts in deterministic (BTreeMap) order for resampling.
    let flat: Vec<(&str, u64, u64)> = counts
        .iter()
        .map(|(id, &(n, k))| (id.as_str(), n, k))
        .collect();

    let diagnostics: Vec<ReplicateDiagnostic> = (0..config.n_replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64);
            match run_replicate(
                &mut rng,
                &flat,
                cbgs,
                error_model,
                validation_cells.as_ref(),
                scheme,
                zone_filter,
                config.stratified_by_cbg,
                &group_order,
            ) {
                Ok(values) => ReplicateDiagnostic {
                    replicate: r,
                    ok: true,
                    values: Some(values),
                    error: None,
                },
                Err(e) => ReplicateDiagnostic {
                    replicate: r,
                    ok: false,
                    values: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let n_failed = diagnostics.iter().filter(|d| !d.ok).count();
    if n_failed as f64 > MAX_FAILED_FRACTION * config.n_replicates as f64 {
        return Err(Error::BootstrapFailed {
            failed: n_failed,
            total: config.n_replicates,
        });
    }
    let n_ok = config.n_replicates - n_failed;
    if n_ok < 2 {
        return Err(Error::BootstrapFailed {
            failed: n_failed,
            total: config.n_replicates,
        });
    }

    for (i, est) in estimates.iter_mut().enumerate() {
        let mut abs_values = Vec::with_capacity(n_ok);
        let mut rel_values = Vec::with_capacity(n_ok);
        for d in &diagnostics {
            if let Some(values) = &d.values {
                abs_values.push(values[i].0);
                rel_values.push(values[i].1);
            }
        }
        est.ci_half_width = Some(Z_95 * sample_sd(&rel_values));
        est.ci_half_width_absolute = Some(Z_95 * sample_sd(&abs_values));
    }

    Ok(BootstrapOutcome {
        estimates,
        n_failed,
        diagnostics,
    })
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    debug_assert!(n >= 2);
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

fn binomial(rng: &mut ChaCha8Rng, n: u64, p: f64) -> Result<u64> {
    if n == 0 || p <= 0.0 {
        return Ok(0);
    }
    if p >= 1.0 {
        return Ok(n);
    }
    let dist = Binomial::new(n, p)
        .map_err(|e| Error::Runtime(format!("binomial({}, {}): {}", n, p, e)))?;
    Ok(dist.sample(rng))
}

/// Draw a multinomial over `cells` totals via sequential conditional
/// binomials; returns one draw per cell.
fn multinomial(rng: &mut ChaCha8Rng, total: u64, cells: &[u64]) -> Result<Vec<u64>> {
    debug_assert_eq!(cells.iter().sum::<u64>(), total);
    let mut out = Vec::with_capacity(cells.len());
    let mut remaining_n = total;
    let mut remaining_w = total;
    for &c in cells {
        if remaining_w == 0 {
            out.push(0);
            continue;
        }
        let draw = binomial(rng, remaining_n, c as f64 / remaining_w as f64)?;
        out.push(draw);
        remaining_n -= draw;
        remaining_w -= c;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_replicate(
    rng: &mut ChaCha8Rng,
    flat: &[(&str, u64, u64)],
    cbgs: &[CensusBlockGroup],
    error_model: &ClassifierErrorModel,
    validation_cells: Option<&ValidationCells>,
    scheme: &GroupingScheme,
    zone_filter: Option<ZoneType>,
    stratified: bool,
    group_order: &[String],
) -> Result<Vec<(f64, f64)>> {
    // Resample the error model first (when enabled) so the draw order is
    // fixed regardless of the counts layout.
    let replicate_model = match validation_cells {
        None => error_model.clone(),
        Some(cells) => {
            let total = cells.tp + cells.fp + cells.fn_ + cells.tn;
            let drawn =
                multinomial(rng, total, &[cells.tp, cells.fp, cells.fn_, cells.tn])?;
            let (tp, fp, fn_, tn) = (drawn[0], drawn[1], drawn[2], drawn[3]);
            let n_pp = tp + fp;
            let n_np = fn_ + tn;
            if n_pp == 0 || n_np == 0 {
                return Err(Error::Precondition(
                    "validation resample emptied a prediction side".into(),
                ));
            }
            let mut m = error_model.clone();
            m.precision = tp as f64 / n_pp as f64;
            m.false_omission_rate = fn_ as f64 / n_np as f64;
            m.n_pred_positive = n_pp;
            m.n_pred_negative = n_np;
            m
        }
    };

    let mut resampled: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    if stratified {
        for &(id, n, k) in flat {
            if n == 0 {
                continue;
            }
            let k2 = binomial(rng, n, k as f64 / n as f64)?;
            resampled.insert(id.to_string(), (n, k2));
        }
    } else {
        // Pool all images: cells are (cbg positive, cbg negative) pairs.
        let total: u64 = flat.iter().map(|&(_, n, _)| n).sum();
        let cells: Vec<u64> = flat
            .iter()
            .flat_map(|&(_, n, k)| [k, n - k])
            .collect();
        let drawn = multinomial(rng, total, &cells)?;
        for (i, &(id, _, _)) in flat.iter().enumerate() {
            let k2 = drawn[2 * i];
            let n2 = k2 + drawn[2 * i + 1];
            if n2 > 0 {
                resampled.insert(id.to_string(), (n2, k2));
            }
        }
    }

    let (prevalences, _) = cbg_prevalence(&resampled, &replicate_model)?;
    let table = relative_disparities(scheme, cbgs, &prevalences, zone_filter)?;
    if table.len() != group_order.len() {
        return Err(Error::Runtime(
            "replicate produced a different group set than the point estimate".into(),
        ));
    }
    Ok(table
        .iter()
        .zip(group_order)
        .map(|(row, expected)| {
            debug_assert_eq!(&row.group_value, expected);
            (row.absolute_rate, row.relative_rate)
        })
        .collect())
}

/// Convenience: estimate an error model from validation records and
/// bootstrap with it.
pub fn bootstrap_with_validation(
    counts: &BTreeMap<String, (u64, u64)>,
    cbgs: &[CensusBlockGroup],
    validation: &[LabeledRecord],
    threshold: f64,
    scheme: &GroupingScheme,
    zone_filter: Option<ZoneType>,
    config: &BootstrapConfig,
) -> Result<BootstrapOutcome> {
    let model = estimate_error_model(validation, threshold)?;
    bootstrap_disparities(
        counts,
        cbgs,
        &model,
        Some(validation),
        scheme,
        zone_filter,
        config,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::MultiPolygon;
    use crate::ingest::ZoneType;

    fn cbg(id: &str, pop: f64) -> CensusBlockGroup {
        CensusBlockGroup {
            cbg_id: id.to_string(),
            geometry: MultiPolygon::rect(0.0, 0.0, 1.0, 1.0),
            populations: BTreeMap::from([("g".to_string(), pop)]),
            median_income: None,
            pop_density: 1.0,
            zone_type: ZoneType::Residential,
            borough: "b".into(),
            neighborhood: "n".into(),
        }
    }

    fn perfect_model() -> ClassifierErrorModel {
        ClassifierErrorModel::external(0.5, 1.0, 0.0).unwrap()
    }

    fn scheme_for(cbgs: &[CensusBlockGroup]) -> GroupingScheme {
        GroupingScheme::from_population_columns("race", cbgs)
    }

    #[test]
    fn deterministic_given_seed() {
        let cbgs = vec![cbg("a", 100.0), cbg("b", 100.0)];
        let counts = BTreeMap::from([
            ("a".to_string(), (50u64, 10u64)),
            ("b".to_string(), (50u64, 25u64)),
        ]);
        let config = BootstrapConfig {
            n_replicates: 50,
            seed: 7,
            ..Default::default()
        };
        let scheme = scheme_for(&cbgs);
        let run = || {
            bootstrap_disparities(
                &counts,
                &cbgs,
                &perfect_model(),
                None,
                &scheme,
                None,
                &config,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.estimates.iter().zip(&b.estimates) {
            assert_eq!(x.ci_half_width, y.ci_half_width);
            assert_eq!(x.ci_half_width_absolute, y.ci_half_width_absolute);
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let cbgs: Vec<CensusBlockGroup> =
            (0..20).map(|i| cbg(&format!("c{:02}", i), 100.0)).collect();
        let counts: BTreeMap<String, (u64, u64)> = (0..20)
            .map(|i| (format!("c{:02}", i), (40u64, (i % 7) as u64)))
            .collect();
        let config = BootstrapConfig {
            n_replicates: 40,
            seed: 11,
            ..Default::default()
        };
        let scheme = scheme_for(&cbgs);

        let run_with_threads = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                bootstrap_disparities(
                    &counts,
                    &cbgs,
                    &perfect_model(),
                    None,
                    &scheme,
                    None,
                    &config,
                )
                .unwrap()
            })
        };
        let single = run_with_threads(1);
        let multi = run_with_threads(4);
        for (x, y) in single.estimates.iter().zip(&multi.estimates) {
            assert_eq!(x.ci_half_width, y.ci_half_width);
            assert_eq!(x.ci_half_width_absolute, y.ci_half_width_absolute);
        }
        for (dx, dy) in single.diagnostics.iter().zip(&multi.diagnostics) {
            assert_eq!(dx.values, dy.values);
        }
    }

    #[test]
    fn zero_variance_data_gives_zero_width() {
        // Every image positive in both CBGs: every replicate reproduces the
        // same counts exactly.
        let cbgs = vec![cbg("a", 100.0), cbg("b", 300.0)];
        let counts = BTreeMap::from([
            ("a".to_string(), (30u64, 30u64)),
            ("b".to_string(), (30u64, 30u64)),
        ]);
        let config = BootstrapConfig {
            n_replicates: 100,
            seed: 3,
            ..Default::default()
        };
        let scheme = scheme_for(&cbgs);
        let out = bootstrap_disparities(
            &counts,
            &cbgs,
            &perfect_model(),
            None,
            &scheme,
            None,
            &config,
        )
        .unwrap();
        for est in &out.estimates {
            assert_eq!(est.ci_half_width, Some(0.0));
            assert_eq!(est.ci_half_width_absolute, Some(0.0));
        }
        assert_eq!(out.n_failed, 0);
    }

    #[test]
    fn requires_two_replicates() {
        let cbgs = vec![cbg("a", 100.0)];
        let counts = BTreeMap::from([("a".to_string(), (10u64, 5u64))]);
        let config = BootstrapConfig {
            n_replicates: 1,
            ..Default::default()
        };
        let scheme = scheme_for(&cbgs);
        assert!(bootstrap_disparities(
            &counts,
            &cbgs,
            &perfect_model(),
            None,
            &scheme,
            None,
            &config
        )
        .is_err());
    }

    #[test]
    fn validation_resampling_requires_validation() {
        let cbgs = vec![cbg("a", 100.0)];
        let counts = BTreeMap::from([("a".to_string(), (10u64, 5u64))]);
        let config = BootstrapConfig {
            resample_unit: ResampleUnit::ImagesAndValidation,
            n_replicates: 10,
            ..Default::default()
        };
        let scheme = scheme_for(&cbgs);
        let err = bootstrap_disparities(
            &counts,
            &cbgs,
            &perfect_model(),
            None,
            &scheme,
            None,
            &config,
        )
        .unwrap_err();
        assert!(err.to_string().contains("validation"));
    }

    #[test]
    fn pooled_resampling_drops_lost_cbgs_but_errors_when_too_many_fail() {
        // A CBG with a single image vanishes from ~37% of pooled replicates.
        // With only two CBGs, losing one leaves the other still estimable,
        // so the failure mode to check is different: give the *whole* scheme
        // support only in the 1-image CBG, so a replicate losing it errors.
        let mut a = cbg("a", 100.0); // group g lives only here
        let b = {
            let mut c = cbg("b", 0.0);
            c.populations = BTreeMap::from([("g".to_string(), 0.0), ("h".to_string(), 50.0)]);
            c
        };
        a.populations.insert("h".to_string(), 0.0);
        let cbgs = vec![a, b];
        let counts = BTreeMap::from([
            ("a".to_string(), (1u64, 1u64)),
            ("b".to_string(), (500u64, 100u64)),
        ]);
        let config = BootstrapConfig {
            n_replicates: 100,
            seed: 5,
            stratified_by_cbg: false,
            ..Default::default()
        };
        let scheme = scheme_for(&cbgs);
        let err = bootstrap_disparities(
            &counts,
            &cbgs,
            &perfect_model(),
            None,
            &scheme,
            None,
            &config,
        )
        .unwrap_err();
        match err {
            Error::BootstrapFailed { failed, total } => {
                assert_eq!(total, 100);
                // ~ Binomial(100, e^-1): far more than the 1% budget.
                assert!(failed > 10, "expected many failures, got {}", failed);
            }
            other => panic!("expected bootstrap failure, got {other:?}"),
        }
    }

    #[test]
    fn pooled_resampling_tolerates_rare_cbg_loss() {
        // 5 images in the small CBG vanish from a replicate with
        // probability ~ e^-5 = 0.7%. Since group g also lives in CBG b,
        // those replicates just renormalize onto b: dropped support is a
        // reweighting event, not a failure.
        let cbgs = vec![cbg("a", 100.0), cbg("b", 100.0)];
        let counts = BTreeMap::from([
            ("a".to_string(), (5u64, 2u64)),
            ("b".to_string(), (500u64, 100u64)),
        ]);
        let config = BootstrapConfig {
            n_replicates: 400,
            seed: 12,
            stratified_by_cbg: false,
            ..Default::default()
        };
        let scheme = scheme_for(&cbgs);
        let out = bootstrap_disparities(
            &counts,
            &cbgs,
            &perfect_model(),
            None,
            &scheme,
            None,
            &config,
        )
        .unwrap();
        // Replicates that drop CBG a still estimate from b alone (weights
        // renormalize); no failures expected at all here.
        assert_eq!(out.n_failed, 0);
        // Group g holds the whole population, so its relative rate is
        // pinned at 1 (zero spread); the absolute rate still varies.
        assert_eq!(out.estimates[1].group_value, "g");
        assert_eq!(out.estimates[1].ci_half_width, Some(0.0));
        assert!(out.estimates[1].ci_half_width_absolute.unwrap() > 0.0);
    }
}
