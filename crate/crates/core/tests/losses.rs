use capsule_core::distance::{self, Metric};
use capsule_core::losses::{
    focal_loss, setwise_ranking_loss, FocalConfig, RankingBatchItem, RankingComponents, RankingConfig,
};
use proptest::collection::vec;
use proptest::prelude::*;

fn cfg(components: RankingComponents) -> RankingConfig {
    RankingConfig {
        margin: 2.0,
        metric: Metric::Euclidean,
        components,
    }
}

fn batch_item(dim: usize, negatives: usize) -> impl Strategy<Value = RankingBatchItem> {
    (
        vec(-3.0f64..3.0, dim),
        vec(-3.0f64..3.0, dim),
        vec(vec(-3.0f64..3.0, dim), negatives),
    )
        .prop_map(|(t, positive, negatives)| RankingBatchItem { t, positive, negatives })
}

fn sized_item() -> impl Strategy<Value = RankingBatchItem> {
    (1usize..6, 1usize..12).prop_flat_map(|(d, s)| batch_item(d, s))
}

/// Rotation in the plane of coordinates `i` and `j`.
fn rotate(v: &[f64], i: usize, j: usize, angle: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    let (c, s) = (angle.cos(), angle.sin());
    out[i] = c * v[i] - s * v[j];
    out[j] = s * v[i] + c * v[j];
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ranking_loss_is_nonnegative_and_zero_iff_margins_hold(item in sized_item()) {
        let loss = setwise_ranking_loss(&item, &cfg(RankingComponents::AllPlusHard)).unwrap();
        prop_assert!(loss >= 0.0);
        let dp = distance::between(Metric::Euclidean, &item.t, &item.positive);
        let satisfied = item
            .negatives
            .iter()
            .all(|n| dp + 2.0 <= distance::between(Metric::Euclidean, &item.t, n));
        prop_assert_eq!(loss == 0.0, satisfied);
    }

    #[test]
    fn single_negative_doubles_the_all_term(item in (1usize..6).prop_flat_map(|d| batch_item(d, 1))) {
        let all = setwise_ranking_loss(&item, &cfg(RankingComponents::All)).unwrap();
        let total = setwise_ranking_loss(&item, &cfg(RankingComponents::AllPlusHard)).unwrap();
        prop_assert_eq!(total, 2.0 * all);
    }

    #[test]
    fn ranking_loss_is_rotation_invariant(
        item in (2usize..6).prop_flat_map(|d| batch_item(d, 5)),
        angle in 0.0f64..std::f64::consts::TAU,
        axes in (0usize..6, 0usize..6),
    ) {
        let d = item.t.len();
        let (i, j) = (axes.0 % d, axes.1 % d);
        prop_assume!(i != j);
        let rotated = RankingBatchItem {
            t: rotate(&item.t, i, j, angle),
            positive: rotate(&item.positive, i, j, angle),
            negatives: item.negatives.iter().map(|n| rotate(n, i, j, angle)).collect(),
        };
        let c = cfg(RankingComponents::AllPlusHard);
        let a = setwise_ranking_loss(&item, &c).unwrap();
        let b = setwise_ranking_loss(&rotated, &c).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn ranking_loss_costs_one_distance_per_candidate(item in sized_item()) {
        distance::reset_evaluations();
        setwise_ranking_loss(&item, &cfg(RankingComponents::AllPlusHard)).unwrap();
        prop_assert_eq!(distance::evaluations(), 1 + item.negatives.len() as u64);
    }

    #[test]
    fn focal_loss_is_nonnegative_and_decreases_toward_the_label(s in 0.01f64..0.98, label in 0u8..2) {
        let c = FocalConfig::default();
        let here = focal_loss(&[s], &[label], c).unwrap();
        let closer = if label == 1 { s + 0.01 } else { s - 0.005 };
        prop_assert!(here >= 0.0);
        prop_assert!(focal_loss(&[closer], &[label], c).unwrap() < here);
    }
}

#[test]
fn focal_reference_values() {
    let bce = 2.0 * focal_loss(&[0.5], &[1], FocalConfig { gamma: 0.0, alpha: 0.5 }).unwrap();
    assert!((bce - std::f64::consts::LN_2).abs() < 1e-15);
    let l = focal_loss(&[0.9], &[1], FocalConfig { gamma: 2.0, alpha: 1.0 }).unwrap();
    let expected = 0.01 * -(0.9f64.ln());
    assert!((l - expected).abs() < 1e-15);
    assert!((l - 1.0536e-3).abs() < 1e-7);
    assert!(focal_loss(&[1.0 - 1e-12], &[1], FocalConfig::default()).unwrap() < 1e-12);
}

#[test]
fn focal_clamps_at_the_boundary() {
    let l = focal_loss(&[0.0], &[1], FocalConfig { gamma: 0.0, alpha: 1.0 }).unwrap();
    assert!((l - -(1e-7f64.ln())).abs() < 1e-9);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(focal_loss(&[0.5], &[2], FocalConfig::default()).is_err());
    assert!(focal_loss(&[0.5, 0.4], &[1], FocalConfig::default()).is_err());
    let c = cfg(RankingComponents::AllPlusHard);
    let mismatched = RankingBatchItem {
        t: vec![0.0, 1.0],
        positive: vec![0.0],
        negatives: vec![vec![1.0, 1.0]],
    };
    assert!(setwise_ranking_loss(&mismatched, &c).is_err());
    let empty = RankingBatchItem {
        t: vec![0.0],
        positive: vec![0.0],
        negatives: vec![],
    };
    assert!(setwise_ranking_loss(&empty, &c).is_err());
    let bad_margin = RankingConfig { margin: 0.0, ..c };
    let ok = RankingBatchItem {
        t: vec![0.0],
        positive: vec![0.0],
        negatives: vec![vec![1.0]],
    };
    assert!(setwise_ranking_loss(&ok, &bad_margin).is_err());
}

#[test]
fn squared_metric_is_available() {
    let c = RankingConfig {
        metric: Metric::SquaredEuclidean,
        ..cfg(RankingComponents::AllPlusHard)
    };
    let item = RankingBatchItem {
        t: vec![0.0],
        positive: vec![1.0],
        negatives: vec![vec![2.0]],
    };
    // d_p = 1, d_n = 4: [1 - 4 + 2]_+ = 0.
    assert_eq!(setwise_ranking_loss(&item, &c).unwrap(), 0.0);
}
