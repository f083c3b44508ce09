//! Census-reweighted, misclassification-corrected disparity estimation.
//!
//! The pipeline: per-CBG predicted-positive fractions are corrected for
//! classifier error (raw * precision + (1 - raw) * false_omission_rate,
//! which is the exact expected label rate when the error model holds), then
//! averaged with group population weights w_ca = N_ca / sum_c N_ca so that
//! each group's estimate reflects where that group lives rather than where
//! the images were taken. Relative disparities divide by the
//! population-weighted city average, whose own relative rate is 1 by
//! construction.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::eval::ClassifierErrorModel;
use crate::ingest::{CensusBlockGroup, ZoneType};

/// Reserved group value for the population-weighted city average row.
pub const OVERALL_GROUP: &str = "overall";

/// Per-CBG detection prevalence: raw predicted-positive fraction and the
/// misclassification-corrected rate.
#[derive(Debug, Clone, Serialize)]
pub struct CbgPrevalence {
    pub cbg_id: String,
    pub n_images: u64,
    pub n_pred_positive: u64,
    pub raw_rate: f64,
    pub corrected_rate: f64,
}

/// One row of a disparity table. `ci_half_width` is on the relative scale
/// (the +/- of "1.62x +/- 0.01"); `ci_half_width_absolute` is the same
/// uncertainty on the absolute rate. Both are None until a bootstrap fills
/// them in.
#[derive(Debug, Clone, Serialize)]
pub struct DisparityEstimate {
    pub group_value: String,
    pub absolute_rate: f64,
    pub relative_rate: f64,
    pub ci_half_width: Option<f64>,
    pub ci_half_width_absolute: Option<f64>,
    /// CBGs with nonzero weight and an observed prevalence.
    pub n_cbgs: u64,
    /// Group population over the analysis set (the weight denominator).
    pub population: f64,
}

/// How CBGs map to groups: through a population column (a CBG contributes
/// its group-a population to group a), or through a single-valued attribute
/// (borough, zone, quartile) where the CBG's whole population counts toward
/// its attribute value.
#[derive(Debug, Clone)]
pub enum GroupMembership {
    PopulationColumn,
    CbgAttribute(BTreeMap<String, String>),
}

#[derive(Debug, Clone)]
pub struct GroupingScheme {
    pub name: String,
    pub values: Vec<String>,
    pub membership: GroupMembership,
}

impl GroupingScheme {
    /// Scheme over population columns (every `pop_<group>` except `total`).
    pub fn from_population_columns(name: &str, cbgs: &[CensusBlockGroup]) -> Self {
        let values: BTreeSet<String> = cbgs
            .iter()
            .flat_map(|c| c.populations.keys().cloned())
            .filter(|g| g != "total")
            .collect();
        GroupingScheme {
            name: name.to_string(),
            values: values.into_iter().collect(),
            membership: GroupMembership::PopulationColumn,
        }
    }

    /// Scheme over a CBG attribute; values are the distinct observed ones.
    pub fn from_attribute(
        name: &str,
        cbgs: &[CensusBlockGroup],
        attr: impl Fn(&CensusBlockGroup) -> String,
    ) -> Self {
        let map: BTreeMap<String, String> = cbgs
            .iter()
            .map(|c| (c.cbg_id.clone(), attr(c)))
            .collect();
        let values: BTreeSet<String> = map.values().cloned().collect();
        GroupingScheme {
            name: name.to_string(),
            values: values.into_iter().collect(),
            membership: GroupMembership::CbgAttribute(map),
        }
    }

    /// A CBG's population belonging to `group` under this scheme.
    pub fn population_in(&self, cbg: &CensusBlockGroup, group: &str) -> f64 {
        match &self.membership {
            GroupMembership::PopulationColumn => {
                cbg.populations.get(group).copied().unwrap_or(0.0)
            }
            GroupMembership::CbgAttribute(map) => {
                if map.get(&cbg.cbg_id).map(String::as_str) == Some(group) {
                    cbg.total_population()
                } else {
                    0.0
                }
            }
        }
    }
}

/// Expected true-label rate given a predicted-positive fraction and the
/// classifier's error model.
pub fn corrected_rate(raw_rate: f64, model: &ClassifierErrorModel) -> f64 {
    raw_rate * model.precision + (1.0 - raw_rate) * model.false_omission_rate
}

/// Per-CBG prevalences from (n_images, n_predicted_positive) counts.
/// CBGs with zero images are excluded and reported separately.
pub fn cbg_prevalence(
    counts: &BTreeMap<String, (u64, u64)>,
    model: &ClassifierErrorModel,
) -> Result<(Vec<CbgPrevalence>, Vec<String>)> {
    let mut rates = Vec::new();
    let mut excluded = Vec::new();
    for (cbg_id, &(n, k)) in counts {
        if k > n {
            return Err(Error::Precondition(format!(
                "cbg {:?}: {} predicted positives exceed {} images",
                cbg_id, k, n
            )));
        }
        if n == 0 {
            excluded.push(cbg_id.clone());
            continue;
        }
        let raw = k as f64 / n as f64;
        rates.push(CbgPrevalence {
            cbg_id: cbg_id.clone(),
            n_images: n,
            n_pred_positive: k,
            raw_rate: raw,
            corrected_rate: corrected_rate(raw, model),
        });
    }
    Ok((rates, excluded))
}

/// Post-stratification weights for one group over the analysis CBG set:
/// w_ca = N_ca / sum_c N_ca, restricted to CBGs in `analysis_set`. Only
/// nonzero weights are returned. Errors when the group has no population in
/// the set.
pub fn group_weights(
    cbgs: &[CensusBlockGroup],
    scheme: &GroupingScheme,
    group: &str,
    analysis_set: &BTreeSet<String>,
) -> Result<BTreeMap<String, f64>> {
    let mut raw: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    for cbg in cbgs {
        if !analysis_set.contains(&cbg.cbg_id) {
            continue;
        }
        let pop = scheme.population_in(cbg, group);
        if pop < 0.0 || !pop.is_finite() {
            return Err(Error::Precondition(format!(
                "cbg {:?}: population for group {:?} is {}",
                cbg.cbg_id, group, pop
            )));
        }
        if pop > 0.0 {
            raw.insert(cbg.cbg_id.clone(), pop);
            total += pop;
        }
    }
    if total <= 0.0 {
        return Err(Error::Precondition(format!(
            "group {:?} has zero population over the analysis set",
            group
        )));
    }
    Ok(raw.into_iter().map(|(k, v)| (k, v / total)).collect())
}

/// Population-weighted average of per-CBG rates. Weights are renormalized
/// over the CBGs that actually have a prevalence, so dropped CBGs reweight
/// the rest instead of biasing the sum downward.
pub fn group_estimate(
    rates: &BTreeMap<&str, f64>,
    weights: &BTreeMap<String, f64>,
) -> Result<f64> {
    let mut wsum = 0.0;
    let mut acc = 0.0;
    for (cbg_id, w) in weights {
        if let Some(rate) = rates.get(cbg_id.as_str()) {
            wsum += w;
            acc += w * rate;
        }
    }
    if wsum <= 0.0 {
        return Err(Error::Precondition(
            "no overlap between group weights and observed prevalences".into(),
        ));
    }
    Ok(acc / wsum)
}

/// Full disparity table for one grouping scheme: an `overall` row (relative
/// rate exactly 1) followed by one row per group value, in scheme order.
/// With `zone_filter` set, both the group estimates and the city average are
/// restricted to CBGs of that zone type.
pub fn relative_disparities(
    scheme: &GroupingScheme,
    cbgs: &[CensusBlockGroup],
    prevalences: &[CbgPrevalence],
    zone_filter: Option<ZoneType>,
) -> Result<Vec<DisparityEstimate>> {
    let rate_map: BTreeMap<&str, f64> = prevalences
        .iter()
        .map(|p| (p.cbg_id.as_str(), p.corrected_rate))
        .collect();

    let analysis_set: BTreeSet<String> = cbgs
        .iter()
        .filter(|c| zone_filter.is_none_or(|z| c.zone_type == z))
        .filter(|c| rate_map.contains_key(c.cbg_id.as_str()))
        .map(|c| c.cbg_id.clone())
        .collect();
    if analysis_set.is_empty() {
        return Err(Error::Precondition(match zone_filter {
            Some(z) => format!("no {} CBGs with observed images", z.as_str()),
            None => "no CBGs with observed images".into(),
        }));
    }

    // City average over the same filtered set, weighted by total population.
    let mut city_pop = 0.0;
    let mut city_weights: BTreeMap<String, f64> = BTreeMap::new();
    for cbg in cbgs {
        if !analysis_set.contains(&cbg.cbg_id) {
            continue;
        }
        let pop = cbg.total_population();
        if pop > 0.0 {
            city_weights.insert(cbg.cbg_id.clone(), pop);
            city_pop += pop;
        }
    }
    if city_pop <= 0.0 {
        return Err(Error::Precondition(
            "analysis set has zero total population".into(),
        ));
    }
    for w in city_weights.values_mut() {
        *w /= city_pop;
    }
    let city_avg = group_estimate(&rate_map, &city_weights)?;
    if city_avg <= 0.0 {
        return Err(Error::Precondition(format!(
            "city average rate is {}; relative disparities are undefined",
            city_avg
        )));
    }

    let mut out = Vec::with_capacity(scheme.values.len() + 1);
    out.push(DisparityEstimate {
        group_value: OVERALL_GROUP.to_string(),
        absolute_rate: city_avg,
        relative_rate: 1.0,
        ci_half_width: None,
        ci_half_width_absolute: None,
        n_cbgs: city_weights.len() as u64,
        population: city_pop,
    });
    for group in &scheme.values {
        let weights = group_weights(cbgs, scheme, group, &analysis_set)?;
        let absolute = group_estimate(&rate_map, &weights)?;
        let population: f64 = cbgs
            .iter()
            .filter(|c| analysis_set.contains(&c.cbg_id))
            .map(|c| scheme.population_in(c, group))
            .sum();
        out.push(DisparityEstimate {
            group_value: group.clone(),
            absolute_rate: absolute,
            relative_rate: absolute / city_avg,
            ci_half_width: None,
            ci_half_width_absolute: None,
            n_cbgs: weights.len() as u64,
            population,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Quartile schemes

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuartileAttribute {
    MedianIncome,
    PopDensity,
}

impl QuartileAttribute {
    fn value_of(&self, cbg: &CensusBlockGroup) -> Option<f64> {
        match self {
            QuartileAttribute::MedianIncome => cbg.median_income,
            QuartileAttribute::PopDensity => Some(cbg.pop_density),
        }
    }

    pub fn scheme_name(&self) -> &'static str {
        match self {
            QuartileAttribute::MedianIncome => "income_quartile",
            QuartileAttribute::PopDensity => "density_quartile",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuartileScheme {
    pub scheme: GroupingScheme,
    /// p25 / p50 / p75 boundaries over image-level attribute values.
    pub boundaries: [f64; 3],
    /// True when a quartile collapsed (boundaries not strictly increasing
    /// or some quartile holds no CBG).
    pub degenerate: bool,
    pub n_images_used: u64,
}

/// Nearest-rank percentile: the ceil(p*n)-th smallest value (1-based).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Build a quartile grouping over a CBG attribute with boundaries computed
/// at the image level: each image contributes its CBG's attribute value, so
/// quartiles split the *image* distribution into four equal parts (a
/// CBG-level split would let a few huge CBGs dominate a quartile).
///
/// `image_cbg_ids` lists the assigned CBG of every analysis image; images
/// whose CBG is unknown or lacks the attribute are skipped. Needs at least
/// 4 usable images.
pub fn quartile_scheme(
    attribute: QuartileAttribute,
    cbgs: &[CensusBlockGroup],
    image_cbg_ids: &[String],
) -> Result<QuartileScheme> {
    let attr_by_cbg: BTreeMap<&str, f64> = cbgs
        .iter()
        .filter_map(|c| attribute.value_of(c).map(|v| (c.cbg_id.as_str(), v)))
        .collect();

    let mut image_values: Vec<f64> = image_cbg_ids
        .iter()
        .filter_map(|id| attr_by_cbg.get(id.as_str()).copied())
        .collect();
    if image_values.len() < 4 {
        return Err(Error::Precondition(format!(
            "quartile scheme needs at least 4 images with a known {} value (got {})",
            attribute.scheme_name(),
            image_values.len()
        )));
    }
    image_values.sort_by(f64::total_cmp);
    let boundaries = [
        nearest_rank(&image_values, 0.25),
        nearest_rank(&image_values, 0.50),
        nearest_rank(&image_values, 0.75),
    ];

    let label_of = |v: f64| -> &'static str {
        if v <= boundaries[0] {
            "q1"
        } else if v <= boundaries[1] {
            "q2"
        } else if v <= boundaries[2] {
            "q3"
        } else {
            "q4"
        }
    };
    let map: BTreeMap<String, String> = cbgs
        .iter()
        .filter_map(|c| {
            attribute
                .value_of(c)
                .map(|v| (c.cbg_id.clone(), label_of(v).to_string()))
        })
        .collect();
    let present: BTreeSet<&str> = map.values().map(String::as_str).collect();
    let values: Vec<String> = ["q1", "q2", "q3", "q4"]
        .iter()
        .filter(|q| present.contains(**q))
        .map(|q| q.to_string())
        .collect();
    let degenerate = values.len() < 4
        || !(boundaries[0] < boundaries[1] && boundaries[1] < boundaries[2]);

    Ok(QuartileScheme {
        scheme: GroupingScheme {
            name: attribute.scheme_name().to_string(),
            values,
            membership: GroupMembership::CbgAttribute(map),
        },
        boundaries,
        degenerate,
        n_images_used: image_values.len() as u64,
    })
}

// ---------------------------------------------------------------------------
// External correlation

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PearsonResult {
    pub r: f64,
    pub p_value: f64,
    pub n: u64,
}

/// Pearson correlation with a two-sided p-value from the t distribution
/// with n-2 degrees of freedom. Used to check detection rates against an
/// external measure (e.g. observed deployment counts by precinct).
pub fn external_correlation(pairs: &[(f64, f64)]) -> Result<PearsonResult> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::Precondition(format!(
            "correlation needs at least 3 pairs (got {})",
            n
        )));
    }
    for &(x, y) in pairs {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Precondition(
                "correlation input contains a non-finite value".into(),
            ));
        }
    }
    let nf = n as f64;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Precondition(
            "correlation is undefined for a zero-variance input".into(),
        ));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p_value = if 1.0 - r * r <= f64::EPSILON {
        0.0
    } else {
        let t = r.abs() * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::Runtime(format!("t distribution: {}", e)))?;
        (2.0 * (1.0 - dist.cdf(t))).clamp(0.0, 1.0)
    };
    Ok(PearsonResult {
        r,
        p_value,
        n: n as u64,
    })
}
