//! Property tests for the statistical invariants the estimator depends on.

use std::collections::BTreeMap;

use proptest::prelude::*;

use deploystat::estimator::{
    cbg_prevalence, corrected_rate, group_weights, relative_disparities, GroupingScheme,
};
use deploystat::eval::{
    average_precision, calibration_audit, estimate_error_model, rank_auc, select_threshold,
    ClassifierErrorModel, SubgroupFlags,
};
use deploystat::geom::MultiPolygon;
use deploystat::ingest::{deduplicate, CensusBlockGroup, DetectionRecord, LabeledRecord, ZoneType};

fn record(i: usize, score: f64, lat: f64, lng: f64, ts: i64) -> DetectionRecord {
    DetectionRecord {
        image_id: format!("img-{:05}", i),
        lat,
        lng,
        timestamp: ts,
        score,
    }
}

fn labeled_set(scores: &[(f64, bool)]) -> Vec<LabeledRecord> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &(score, label))| LabeledRecord {
            detection: record(i, score, 0.0, 0.0, i as i64),
            label,
        })
        .collect()
}

/// Scores on a coarse grid so ties are common; both label classes forced.
fn arb_labeled() -> impl Strategy<Value = Vec<LabeledRecord>> {
    proptest::collection::vec((0u32..=20, any::<bool>()), 2..80).prop_map(|raw| {
        let mut set: Vec<(f64, bool)> = raw
            .into_iter()
            .map(|(s, l)| (s as f64 / 20.0, l))
            .collect();
        set[0].1 = true;
        set[1].1 = false;
        labeled_set(&set)
    })
}

proptest! {
    #[test]
    fn auc_and_ap_stay_in_unit_interval(records in arb_labeled()) {
        let auc = rank_auc(&records);
        prop_assert!((0.0..=1.0).contains(&auc));
        let ap = average_precision(&records);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn corrected_rate_is_bounded_by_the_error_model(
        raw in 0.0f64..=1.0,
        precision in 0.01f64..=1.0,
        for_rate in 0.0f64..=0.99,
    ) {
        prop_assume!(for_rate < precision);
        let model = ClassifierErrorModel::external(0.5, precision, for_rate).unwrap();
        let c = corrected_rate(raw, &model);
        prop_assert!(c >= for_rate - 1e-12 && c <= precision + 1e-12);
        // Monotone in the raw rate.
        let c2 = corrected_rate((raw + 0.1).min(1.0), &model);
        prop_assert!(c2 >= c - 1e-12);
    }

    #[test]
    fn error_correction_identity_holds_exactly(records in arb_labeled()) {
        // Both prediction sides must be non-empty for the model to exist.
        let threshold = 0.5;
        let n_pos = records.iter().filter(|r| r.detection.score >= threshold).count();
        prop_assume!(n_pos > 0 && n_pos < records.len());
        let model = estimate_error_model(&records, threshold).unwrap();
        let share_pos = n_pos as f64 / records.len() as f64;
        let prevalence =
            records.iter().filter(|r| r.label).count() as f64 / records.len() as f64;
        prop_assert!((corrected_rate(share_pos, &model) - prevalence).abs() <= 1e-12);
    }

    #[test]
    fn dedup_is_idempotent_and_conserves_records(
        raw in proptest::collection::vec((0u8..4, 0u8..4, 0i64..4), 1..60),
    ) {
        // Draw coordinates/timestamps from tiny grids so collisions are
        // guaranteed to occur.
        let records: Vec<DetectionRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, &(lat, lng, ts))| record(i, 0.5, lat as f64, lng as f64, ts))
            .collect();
        let n = records.len() as u64;
        let (once, removed) = deduplicate(records);
        prop_assert_eq!(once.len() as u64 + removed, n);
        let (twice, removed_again) = deduplicate(once.clone());
        prop_assert_eq!(removed_again, 0);
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn dedup_ignores_input_order(
        raw in proptest::collection::vec((0u8..4, 0u8..4, 0i64..4), 1..40),
        seed in any::<u64>(),
    ) {
        let records: Vec<DetectionRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, &(lat, lng, ts))| record(i, 0.5, lat as f64, lng as f64, ts))
            .collect();
        let mut shuffled = records.clone();
        // Cheap deterministic shuffle.
        let k = shuffled.len();
        for i in 0..k {
            let j = (seed as usize).wrapping_mul(31).wrapping_add(i * 17) % k;
            shuffled.swap(i, j);
        }
        let (a, _) = deduplicate(records);
        let (b, _) = deduplicate(shuffled);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn selected_threshold_is_observed_and_optimal(records in arb_labeled()) {
        let t = select_threshold(&records).unwrap();
        prop_assert!(records.iter().any(|r| r.detection.score == t));
        let f1_at = |cand: f64| {
            let tp = records
                .iter()
                .filter(|r| r.detection.score >= cand && r.label)
                .count() as f64;
            let k = records.iter().filter(|r| r.detection.score >= cand).count() as f64;
            let n_pos = records.iter().filter(|r| r.label).count() as f64;
            2.0 * tp / (k + n_pos)
        };
        let best = f1_at(t);
        for r in &records {
            prop_assert!(f1_at(r.detection.score) <= best + 1e-15);
        }
    }

    #[test]
    fn audit_is_invariant_to_record_order(
        records in arb_labeled(),
        seed in any::<u64>(),
    ) {
        let threshold = 0.5;
        // One subgroup splitting records in half by index parity.
        let flags: SubgroupFlags = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                (
                    r.detection.image_id.clone(),
                    BTreeMap::from([("parity".to_string(), i % 2 == 0)]),
                )
            })
            .collect();
        let rows_a = calibration_audit(&records, threshold, &flags).unwrap();
        let mut shuffled = records.clone();
        let k = shuffled.len();
        for i in 0..k {
            let j = (seed as usize).wrapping_mul(131).wrapping_add(i * 23) % k;
            shuffled.swap(i, j);
        }
        let rows_b = calibration_audit(&shuffled, threshold, &flags).unwrap();
        prop_assert_eq!(rows_a.len(), rows_b.len());
        for (a, b) in rows_a.iter().zip(&rows_b) {
            prop_assert_eq!(&a.subgroup, &b.subgroup);
            prop_assert_eq!(a.side, b.side);
            prop_assert_eq!(a.stratum_flag, b.stratum_flag);
            prop_assert_eq!(a.rate, b.rate);
            prop_assert_eq!(a.n, b.n);
            prop_assert_eq!(a.flagged, b.flagged);
        }
    }
}

fn grid_cbgs(pops: &[(f64, f64)]) -> Vec<CensusBlockGroup> {
    pops.iter()
        .enumerate()
        .map(|(i, &(ga, gb))| CensusBlockGroup {
            cbg_id: format!("c{:03}", i),
            geometry: MultiPolygon::rect(i as f64, 0.0, i as f64 + 1.0, 1.0),
            populations: BTreeMap::from([
                ("ga".to_string(), ga),
                ("gb".to_string(), gb),
                ("total".to_string(), ga + gb),
            ]),
            median_income: None,
            pop_density: 1.0,
            zone_type: ZoneType::Residential,
            borough: "b".into(),
            neighborhood: "n".into(),
        })
        .collect()
}

proptest! {
    #[test]
    fn group_weights_normalize(
        pops in proptest::collection::vec((1.0f64..1e4, 1.0f64..1e4), 2..30),
    ) {
        let cbgs = grid_cbgs(&pops);
        let scheme = GroupingScheme::from_population_columns("g", &cbgs);
        let analysis: std::collections::BTreeSet<String> =
            cbgs.iter().map(|c| c.cbg_id.clone()).collect();
        for group in &scheme.values {
            let w = group_weights(&cbgs, &scheme, group, &analysis).unwrap();
            let total: f64 = w.values().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(w.values().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn population_share_weighted_relative_rates_average_to_one(
        cells in proptest::collection::vec(((1.0f64..1e4, 1.0f64..1e4), 0u64..=50), 2..30),
    ) {
        let pops: Vec<(f64, f64)> = cells.iter().map(|&(p, _)| p).collect();
        let cbgs = grid_cbgs(&pops);
        let counts: BTreeMap<String, (u64, u64)> = cbgs
            .iter()
            .zip(&cells)
            .map(|(c, &(_, k))| (c.cbg_id.clone(), (50u64, k)))
            .collect();
        let model = ClassifierErrorModel::external(0.5, 0.9, 0.01).unwrap();
        let (prev, _) = cbg_prevalence(&counts, &model).unwrap();
        let scheme = GroupingScheme::from_population_columns("g", &cbgs);
        let ests = relative_disparities(&scheme, &cbgs, &prev, None).unwrap();
        prop_assert_eq!(ests[0].relative_rate, 1.0);
        // Groups partition the population, so their relative rates,
        // weighted by population share, must average to exactly 1.
        let total_pop: f64 = ests[1..].iter().map(|e| e.population).sum();
        let mean: f64 = ests[1..]
            .iter()
            .map(|e| e.relative_rate * e.population / total_pop)
            .sum();
        prop_assert!((mean - 1.0).abs() < 1e-9, "population-weighted mean {}", mean);
    }
}
