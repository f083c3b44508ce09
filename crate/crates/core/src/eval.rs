//! Classifier evaluation on labeled validation data: threshold metrics,
//! ranking metrics, error-model estimation, and subgroup calibration audits.
//!
//! Conventions, fixed across the crate:
//! - a score >= threshold is a positive prediction;
//! - ROC AUC uses the rank statistic with ties counted 1/2 (identical to
//!   brute-force pairwise comparison);
//! - average precision is the step-wise, non-interpolated sum in descending
//!   score order, ties broken by stable input order;
//! - binomial uncertainty is the Bernoulli standard error sqrt(p(1-p)/n)
//!   with 1.96x half-widths.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::LabeledRecord;

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
    pub average_precision: f64,
    pub n: u64,
    pub n_positive_labels: u64,
}

/// The misclassification model the estimator corrects with: precision and
/// false omission rate at a fixed operating threshold, with the counts and
/// Bernoulli standard errors behind them.
#[derive(Debug, Clone, Serialize)]
pub struct ClassifierErrorModel {
    pub threshold: f64,
    /// P(label=1 | predicted positive).
    pub precision: f64,
    /// P(label=1 | predicted negative).
    pub false_omission_rate: f64,
    pub n_pred_positive: u64,
    pub n_pred_negative: u64,
    pub se_precision: f64,
    pub se_false_omission_rate: f64,
}

impl ClassifierErrorModel {
    /// An externally supplied error model (e.g. published operating
    /// characteristics) with no counts behind it.
    pub fn external(threshold: f64, precision: f64, false_omission_rate: f64) -> Result<Self> {
        for (name, v) in [("precision", precision), ("false_omission_rate", false_omission_rate)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Precondition(format!(
                    "{} {} outside [0, 1]",
                    name, v
                )));
            }
        }
        Ok(ClassifierErrorModel {
            threshold,
            precision,
            false_omission_rate,
            n_pred_positive: 0,
            n_pred_negative: 0,
            se_precision: 0.0,
            se_false_omission_rate: 0.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSide {
    PositivePredictions,
    NegativePredictions,
}

impl PredictionSide {
    pub fn as_str(&self) -> &'static str {
        match self {
            PredictionSide::PositivePredictions => "positive_predictions",
            PredictionSide::NegativePredictions => "negative_predictions",
        }
    }
}

/// One calibration cell: a subgroup stratum on one prediction side.
/// `rate` is the empirical label rate (precision on the positive side,
/// false omission rate on the negative side) and `half_width` the 1.96x
/// Bernoulli half-interval. `flagged` is set on both strata of a side whose
/// intervals are strictly disjoint.
#[derive(Debug, Clone, Serialize)]
pub struct SubgroupCalibrationRow {
    pub subgroup: String,
    pub side: PredictionSide,
    /// True = the stratum the flag names (e.g. above-median, daytime).
    pub stratum_flag: bool,
    pub rate: f64,
    pub half_width: f64,
    pub n: u64,
    /// Fewer than one record landed in this cell; it cannot be flagged.
    pub insufficient: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubgroupMetricsRow {
    pub subgroup: String,
    pub stratum_flag: bool,
    pub n: u64,
    pub auc: f64,
    pub average_precision: f64,
}

/// Per-image subgroup flags: image_id -> subgroup name -> in-stratum flag.
/// An image absent from a subgroup's map is excluded from that subgroup's
/// audit (e.g. no assigned CBG, or missing income data).
pub type SubgroupFlags = BTreeMap<String, BTreeMap<String, bool>>;

pub fn bernoulli_se(p: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

/// z for the 95% two-sided normal interval, used everywhere an interval or
/// half-width is reported.
pub const Z_95: f64 = 1.96;

fn counts_at(records: &[LabeledRecord], threshold: f64) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for r in records {
        let pred = r.detection.score >= threshold;
        match (pred, r.label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// Rank-statistic ROC AUC with average ranks for tied scores. Exactly
/// equivalent to counting concordant pairs with ties worth 1/2: all
/// intermediate values are half-integers, exactly representable.
pub fn rank_auc(records: &[LabeledRecord]) -> f64 {
    let n = records.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| records[a].detection.score.total_cmp(&records[b].detection.score));
    let mut n_pos = 0u64;
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n
            && records[idx[j]].detection.score == records[idx[i]].detection.score
        {
            j += 1;
        }
        // Ranks i+1 ..= j (1-based) share the average (i+1+j)/2.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if records[k].label {
                n_pos += 1;
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let n_neg = n as u64 - n_pos;
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * n_neg as f64)
}

/// Non-interpolated average precision: walk the ranking in descending score
/// order (stable on ties) and average precision-at-k over the positives.
pub fn average_precision(records: &[LabeledRecord]) -> f64 {
    let n = records.len();
    let mut idx: Vec<usize> = (0..n).collect();
    // Stable sort: equal scores keep input order.
    idx.sort_by(|&a, &b| records[b].detection.score.total_cmp(&records[a].detection.score));
    let mut hits = 0u64;
    let mut sum = 0.0f64;
    for (k, &i) in idx.iter().enumerate() {
        if records[i].label {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / hits as f64
}

fn require_both_classes(records: &[LabeledRecord], what: &str) -> Result<(u64, u64)> {
    let n_pos = records.iter().filter(|r| r.label).count() as u64;
    let n_neg = records.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Precondition(format!(
            "{} requires both label classes (got {} positive, {} negative)",
            what, n_pos, n_neg
        )));
    }
    Ok((n_pos, n_neg))
}

/// Precision, recall, ROC AUC, and average precision at a threshold.
pub fn binary_metrics(records: &[LabeledRecord], threshold: f64) -> Result<MetricsReport> {
    let (n_pos, _) = require_both_classes(records, "binary_metrics")?;
    let (tp, fp, fn_, _) = counts_at(records, threshold);
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(MetricsReport {
        threshold,
        precision,
        recall,
        auc: rank_auc(records),
        average_precision: average_precision(records),
        n: records.len() as u64,
        n_positive_labels: n_pos,
    })
}

/// Choose the observed score that maximizes F1. Ties go to the larger
/// threshold (fewer positive predictions for the same F1).
pub fn select_threshold(records: &[LabeledRecord]) -> Result<f64> {
    let n_pos = records.iter().filter(|r| r.label).count() as u64;
    if n_pos == 0 {
        return Err(Error::Precondition(
            "threshold selection requires at least one positive label".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[b].detection.score.total_cmp(&records[a].detection.score));

    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_t = 0.0;
    let mut tp = 0u64;
    let mut k = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let t = records[idx[i]].detection.score;
        let mut j = i;
        while j < idx.len() && records[idx[j]].detection.score == t {
            if records[idx[j]].label {
                tp += 1;
            }
            k += 1;
            j += 1;
        }
        // F1 = 2 tp / (2 tp + fp + fn) = 2 tp / (k + n_pos).
        let f1 = 2.0 * tp as f64 / (k + n_pos) as f64;
        if f1 > best_f1 {
            best_f1 = f1;
            best_t = t;
        }
        i = j;
    }
    Ok(best_t)
}

/// Estimate precision and false omission rate at a threshold, with counts
/// and Bernoulli standard errors. Both prediction sides must be non-empty.
pub fn estimate_error_model(records: &[LabeledRecord], threshold: f64) -> Result<ClassifierErrorModel> {
    let (tp, fp, fn_, tn) = counts_at(records, threshold);
    let n_pp = tp + fp;
    let n_np = fn_ + tn;
    if n_pp == 0 {
        return Err(Error::Precondition(format!(
            "no predicted positives at threshold {}; precision is undefined",
            threshold
        )));
    }
    if n_np == 0 {
        return Err(Error::Precondition(format!(
            "no predicted negatives at threshold {}; false omission rate is undefined",
            threshold
        )));
    }
    let precision = tp as f64 / n_pp as f64;
    let for_rate = fn_ as f64 / n_np as f64;
    Ok(ClassifierErrorModel {
        threshold,
        precision,
        false_omission_rate: for_rate,
        n_pred_positive: n_pp,
        n_pred_negative: n_np,
        se_precision: bernoulli_se(precision, n_pp),
        se_false_omission_rate: bernoulli_se(for_rate, n_np),
    })
}

struct Cell {
    n: u64,
    pos: u64,
}

/// Audit calibration across subgroups: for each subgroup and prediction
/// side, compare the empirical label rate of the two strata. Strata whose
/// 95% intervals are strictly disjoint get flagged; empty strata are marked
/// insufficient and never flagged.
pub fn calibration_audit(
    records: &[LabeledRecord],
    threshold: f64,
    flags: &SubgroupFlags,
) -> Result<Vec<SubgroupCalibrationRow>> {
    if records.is_empty() {
        return Err(Error::Precondition(
            "calibration audit requires labeled records".into(),
        ));
    }
    let subgroups: std::collections::BTreeSet<&str> = flags
        .values()
        .flat_map(|m| m.keys().map(|s| s.as_str()))
        .collect();
    if subgroups.is_empty() {
        return Err(Error::Precondition(
            "calibration audit requires at least one subgroup flag".into(),
        ));
    }

    let mut rows = Vec::new();
    for subgroup in subgroups {
        // cells[side][stratum]: side 0 = positive predictions.
        let mut cells = [[Cell { n: 0, pos: 0 }, Cell { n: 0, pos: 0 }], [
            Cell { n: 0, pos: 0 },
            Cell { n: 0, pos: 0 },
        ]];
        for r in records {
            let Some(&stratum) = flags
                .get(&r.detection.image_id)
                .and_then(|m| m.get(subgroup))
            else {
                continue;
            };
            let side = usize::from(r.detection.score < threshold);
            let cell = &mut cells[side][usize::from(stratum)];
            cell.n += 1;
            if r.label {
                cell.pos += 1;
            }
        }
        for (side_idx, side) in [
            PredictionSide::PositivePredictions,
            PredictionSide::NegativePredictions,
        ]
        .into_iter()
        .enumerate()
        {
            let pair = &cells[side_idx];
            let stat = |c: &Cell| -> (f64, f64) {
                if c.n == 0 {
                    (0.0, 0.0)
                } else {
                    let rate = c.pos as f64 / c.n as f64;
                    (rate, Z_95 * bernoulli_se(rate, c.n))
                }
            };
            let (rate_f, hw_f) = stat(&pair[0]);
            let (rate_t, hw_t) = stat(&pair[1]);
            let both_present = pair[0].n > 0 && pair[1].n > 0;
            let disjoint = both_present
                && ((rate_f + hw_f < rate_t - hw_t) || (rate_t + hw_t < rate_f - hw_f));
            for (stratum, rate, hw, n) in [
                (false, rate_f, hw_f, pair[0].n),
                (true, rate_t, hw_t, pair[1].n),
            ] {
                rows.push(SubgroupCalibrationRow {
                    subgroup: subgroup.to_string(),
                    side,
                    stratum_flag: stratum,
                    rate,
                    half_width: hw,
                    n,
                    insufficient: n == 0,
                    flagged: disjoint,
                });
            }
        }
    }
    Ok(rows)
}

/// Names of subgroups with at least one flagged row.
pub fn flagged_subgroups(rows: &[SubgroupCalibrationRow]) -> Vec<String> {
    let mut out: Vec<String> = rows
        .iter()
        .filter(|r| r.flagged)
        .map(|r| r.subgroup.clone())
        .collect();
    out.dedup();
    out
}

/// Ranking metrics (AUC / AP) per subgroup stratum. Errors if any stratum
/// lacks one of the label classes, naming the stratum.
pub fn subgroup_metrics(
    records: &[LabeledRecord],
    threshold: f64,
    flags: &SubgroupFlags,
) -> Result<Vec<SubgroupMetricsRow>> {
    let subgroups: std::collections::BTreeSet<&str> = flags
        .values()
        .flat_map(|m| m.keys().map(|s| s.as_str()))
        .collect();
    let mut rows = Vec::new();
    for subgroup in subgroups {
        for stratum in [false, true] {
            let slice: Vec<LabeledRecord> = records
                .iter()
                .filter(|r| {
                    flags
                        .get(&r.detection.image_id)
                        .and_then(|m| m.get(subgroup))
                        .copied()
                        == Some(stratum)
                })
                .cloned()
                .collect();
            let metrics = binary_metrics(&slice, threshold).map_err(|e| {
                Error::Precondition(format!(
                    "subgroup {:?} stratum {}: {}",
                    subgroup, stratum, e
                ))
            })?;
            rows.push(SubgroupMetricsRow {
                subgroup: subgroup.to_string(),
                stratum_flag: stratum,
                n: slice.len() as u64,
                auc: metrics.auc,
                average_precision: metrics.average_precision,
            });
        }
    }
    Ok(rows)
}
