mod common;

use std::cell::Cell;

use capsule_core::data::{generate_synthetic, make_retrieval_queries, Catalog, FitbQuestion, SplitName, SyntheticSpec};
use capsule_core::eval::{
    auc, evaluate_cp, evaluate_fitb, fitb_accuracy, recall_at_k, recall_from_records, FitbMode, FitbScorer, QueryRecord,
};
use capsule_core::index::EmbeddingIndex;
use capsule_core::model::{HeadSet, OutfitModel};
use capsule_core::{Error, Result};
use common::{rng, tiny_data, tiny_model_config, tiny_spec};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct RandomScorer(std::cell::RefCell<ChaCha8Rng>);

impl FitbScorer for RandomScorer {
    fn mode(&self) -> FitbMode {
        FitbMode::CpScore
    }
    fn score(&self, questions: &[&FitbQuestion]) -> Result<Vec<Vec<f64>>> {
        let mut r = self.0.borrow_mut();
        Ok(questions
            .iter()
            .map(|q| q.candidates.iter().map(|_| r.random()).collect())
            .collect())
    }
}

/// Reads the planted styles: a candidate scores 1 when it matches the
/// style of the partial outfit.
struct StyleOracle<'a> {
    catalog: &'a Catalog,
    calls: Cell<usize>,
}

impl FitbScorer for StyleOracle<'_> {
    fn mode(&self) -> FitbMode {
        FitbMode::CpScore
    }
    fn score(&self, questions: &[&FitbQuestion]) -> Result<Vec<Vec<f64>>> {
        self.calls.set(self.calls.get() + 1);
        Ok(questions
            .iter()
            .map(|q| {
                let style = self.catalog.get(&q.partial[0]).unwrap().style;
                q.candidates
                    .iter()
                    .map(|c| f64::from(u8::from(self.catalog.get(c).unwrap().style == style)))
                    .collect()
            })
            .collect())
    }
}

/// Applies `a * s + b` to an inner scorer.
struct Affine<S> {
    inner: S,
    a: f64,
    b: f64,
}

impl<S: FitbScorer> FitbScorer for Affine<S> {
    fn mode(&self) -> FitbMode {
        self.inner.mode()
    }
    fn score(&self, questions: &[&FitbQuestion]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .inner
            .score(questions)?
            .into_iter()
            .map(|s| s.into_iter().map(|x| self.a * x + self.b).collect())
            .collect())
    }
}

fn fitb_pool(min: usize) -> (capsule_core::data::DatasetSplit, Vec<FitbQuestion>) {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        ..SyntheticSpec::default()
    };
    let mut seed = 0;
    loop {
        let data = generate_synthetic(&spec, seed).unwrap();
        let qs: Vec<FitbQuestion> = data.fitb.values().flatten().cloned().collect();
        if qs.len() >= min {
            return (data, qs);
        }
        seed += 1;
    }
}

#[test]
fn random_scorer_is_at_chance() {
    let (_, mut qs) = fitb_pool(600);
    while qs.len() < 2000 {
        let more = qs.clone();
        qs.extend(more);
    }
    qs.truncate(2000);
    let report = fitb_accuracy(&RandomScorer(rng(1).into()), &qs, 1).unwrap();
    let acc = report.metrics["accuracy_cp_score"];
    assert!((acc - 0.25).abs() < 0.03, "{acc}");
    assert_eq!(report.records.len(), 2000);
}

#[test]
fn style_oracle_answers_every_noiseless_question() {
    let (data, qs) = fitb_pool(1);
    let oracle = StyleOracle {
        catalog: &data.catalog,
        calls: Cell::new(0),
    };
    let report = fitb_accuracy(&oracle, &qs, 0).unwrap();
    assert_eq!(report.metrics["accuracy_cp_score"], 1.0);
    assert_eq!(oracle.calls.get(), 1);
}

#[test]
fn fitb_argmax_survives_positive_affine_maps() {
    let (data, qs) = fitb_pool(1);
    let noisy = RandomScorer(rng(2).into());
    let base = fitb_accuracy(&noisy, &qs, 0).unwrap();
    let mapped = Affine {
        inner: RandomScorer(rng(2).into()),
        a: 3.5,
        b: -7.0,
    };
    assert_eq!(fitb_accuracy(&mapped, &qs, 0).unwrap().records, base.records);
    let oracle = Affine {
        inner: StyleOracle {
            catalog: &data.catalog,
            calls: Cell::new(0),
        },
        a: 0.1,
        b: 2.0,
    };
    assert_eq!(
        fitb_accuracy(&oracle, &qs, 0).unwrap().metrics["accuracy_cp_score"],
        1.0
    );
}

#[test]
fn ties_go_to_the_lowest_candidate() {
    struct Flat;
    impl FitbScorer for Flat {
        fn mode(&self) -> FitbMode {
            FitbMode::CpScore
        }
        fn score(&self, q: &[&FitbQuestion]) -> Result<Vec<Vec<f64>>> {
            Ok(q.iter().map(|_| vec![0.5; 4]).collect())
        }
    }
    let (_, qs) = fitb_pool(1);
    let report = fitb_accuracy(&Flat, &qs, 0).unwrap();
    for r in &report.records {
        assert!(matches!(
            r,
            QueryRecord::Fitb {
                chosen: 0,
                tie: true,
                ..
            }
        ));
    }
}

#[test]
fn malformed_questions_are_rejected() {
    let (_, mut qs) = fitb_pool(1);
    qs[0].candidates.pop();
    assert!(fitb_accuracy(&RandomScorer(rng(3).into()), &qs, 0).is_err());
}

#[test]
fn both_fitb_modes_share_one_report() {
    let data = tiny_data(4);
    let m = OutfitModel::new(tiny_model_config(4), HeadSet::BOTH).unwrap();
    let qs = &data.fitb[&SplitName::Test];
    let report = evaluate_fitb(&m, &data.catalog, qs, 4).unwrap();
    assert!(report.metrics.contains_key("accuracy_cp_score"));
    assert!(report.metrics.contains_key("accuracy_cir_distance"));
    assert_eq!(report.records.len(), 2 * qs.len());
    for mode in [FitbMode::CpScore, FitbMode::CirDistance] {
        let recs: Vec<_> = report
            .records
            .iter()
            .filter(|r| matches!(r, QueryRecord::Fitb { mode: m, .. } if *m == mode))
            .collect();
        assert_eq!(recs.len(), qs.len());
        let correct = recs
            .iter()
            .filter(|r| matches!(r, QueryRecord::Fitb { chosen, answer, .. } if chosen == answer))
            .count();
        let key = format!("accuracy_{}", mode.as_str());
        assert_eq!(report.metrics[&key], correct as f64 / qs.len() as f64);
    }
}

#[test]
fn auc_reference_examples() {
    assert_eq!(auc(&[0.9, 0.8, 0.3], &[1, 1, 0]).unwrap(), 1.0);
    assert_eq!(auc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap(), 0.5);
    assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
    assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
}

#[test]
fn cp_report_is_recomputable_from_records() {
    let data = tiny_data(5);
    let m = OutfitModel::new(tiny_model_config(5), HeadSet::CP).unwrap();
    let outfits = &data.compatibility[&SplitName::Test];
    let report = evaluate_cp(&m, &data.catalog, outfits, 5).unwrap();
    assert_eq!(report.records.len(), outfits.len());
    let (scores, labels): (Vec<f64>, Vec<u8>) = report
        .records
        .iter()
        .map(|r| match r {
            QueryRecord::Cp { score, label, .. } => (*score, *label),
            other => panic!("{other:?}"),
        })
        .unzip();
    assert_eq!(report.metrics["auc"], auc(&scores, &labels).unwrap());
}

#[test]
fn recall_is_monotone_and_bounded_by_skips() {
    let data = tiny_data(6);
    let m = OutfitModel::new(tiny_model_config(6), HeadSet::CIR).unwrap();
    let idx = EmbeddingIndex::build(&data.catalog, &m).unwrap();
    let mut queries = make_retrieval_queries(&data.test, &data.catalog, &mut rng(6)).unwrap();
    let mut ghost = queries[0].clone();
    ghost.ground_truth = "ghost".into();
    queries.push(ghost);
    let ks: Vec<usize> = (1..=30).collect();
    let report = recall_at_k(&m, &idx, &data.catalog, &queries, &ks, 6).unwrap();
    assert_eq!(report.records.len(), queries.len());
    assert_eq!(report.skipped, 1);
    let values: Vec<f64> = ks.iter().map(|k| report.metrics[&format!("recall@{k}")]).collect();
    assert!(values.windows(2).all(|w| w[0] <= w[1]));
    for (k, v) in ks.iter().zip(&values) {
        assert_eq!(*v, recall_from_records(&report.records, *k));
    }
    let at_infinity = recall_from_records(&report.records, usize::MAX);
    assert_eq!(at_infinity, 1.0 - 1.0 / queries.len() as f64);
    assert!(recall_at_k(&m, &idx, &data.catalog, &queries, &[0], 6).is_err());
}

#[test]
fn nearest_ground_truth_counts_at_every_k() {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        ..tiny_spec()
    };
    let data = generate_synthetic(&spec, 7).unwrap();
    let m = OutfitModel::new(tiny_model_config(7), HeadSet::CIR).unwrap();
    let idx = EmbeddingIndex::build(&data.catalog, &m).unwrap();
    let queries = make_retrieval_queries(&data.test, &data.catalog, &mut rng(7)).unwrap();
    let report = recall_at_k(&m, &idx, &data.catalog, &queries, &[1, 2, 1000], 7).unwrap();
    for r in &report.records {
        if let QueryRecord::Cir { rank: Some(1), .. } = r {
            assert!(report.metrics["recall@1"] > 0.0);
        }
    }
    assert_eq!(report.metrics["recall@1000"], 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_ignores_increasing_transforms(pairs in vec((0.0f64..1.0, 0u8..2), 2..80)) {
        let (scores, mut labels): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        labels[0] = 0;
        labels[1] = 1;
        let base = auc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let warped: Vec<f64> = scores.iter().map(|s| (5.0 * s).exp() - 2.0).collect();
        prop_assert_eq!(auc(&warped, &labels).unwrap(), base);
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - base)).abs() < 1e-12);
    }
}
