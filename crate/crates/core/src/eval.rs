//! Task metrics: compatibility AUC, fill-in-the-blank accuracy and retrieval
//! recall@k, each with per-query records from which the metrics can be
//! recomputed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Catalog, FitbQuestion, Item, Outfit, RetrievalQuery, FITB_CANDIDATES};
use crate::distance::{self, Metric};
use crate::error::{Error, Result};
use crate::index::EmbeddingIndex;
use crate::model::{OutfitModel, TargetSpec};
use crate::nn::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Cp,
    Fitb,
    Cir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitbMode {
    /// Score each completed outfit with the compatibility head; take argmax.
    CpScore,
    /// Distance from the target embedding to each candidate; take argmin.
    CirDistance,
}

impl FitbMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FitbMode::CpScore => "cp_score",
            FitbMode::CirDistance => "cir_distance",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryRecord {
    Cp {
        outfit_id: String,
        score: f64,
        label: u8,
    },
    Fitb {
        outfit_id: String,
        mode: FitbMode,
        chosen: usize,
        answer: usize,
        tie: bool,
    },
    Cir {
        ground_truth: String,
        /// 1-based rank among same-category candidates; `None` when skipped.
        rank: Option<usize>,
        candidates: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub metrics: BTreeMap<String, f64>,
    pub records: Vec<QueryRecord>,
    pub skipped: usize,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Rank-based AUC (Mann-Whitney U) with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Input(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += mean_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Scores outfits in batches with the compatibility head.
pub fn cp_scores(model: &OutfitModel, catalog: &Catalog, outfits: &[Outfit], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(outfits.len());
    for chunk in outfits.chunks(batch.max(1)) {
        let items = chunk
            .iter()
            .map(|o| catalog.resolve(&o.items))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::no_grad();
        let s = model.cp_scores(&mut g, &items)?;
        out.extend_from_slice(g.value(s).data());
    }
    Ok(out)
}

/// Compatibility AUC over labelled outfits.
pub fn evaluate_cp(model: &OutfitModel, catalog: &Catalog, outfits: &[Outfit], seed: u64) -> Result<EvalReport> {
    let labels: Vec<u8> = outfits
        .iter()
        .map(|o| {
            o.label
                .ok_or_else(|| Error::Input(format!("outfit {} has no label", o.outfit_id)))
        })
        .collect::<Result<_>>()?;
    let scores = cp_scores(model, catalog, outfits, 100)?;
    let value = auc(&scores, &labels)?;
    Ok(EvalReport {
        task: Task::Cp,
        metrics: BTreeMap::from([("auc".to_string(), value)]),
        records: outfits
            .iter()
            .zip(scores.iter().zip(&labels))
            .map(|(o, (&score, &label))| QueryRecord::Cp {
                outfit_id: o.outfit_id.clone(),
                score,
                label,
            })
            .collect(),
        skipped: 0,
        config: serde_json::to_value(model.config()).expect("config serializes"),
        seed,
    })
}

/// Produces one score per candidate, higher meaning a better completion.
pub trait FitbScorer {
    fn mode(&self) -> FitbMode;
    fn score(&self, questions: &[&FitbQuestion]) -> Result<Vec<Vec<f64>>>;
}

/// Model-backed scorer in either mode.
pub struct ModelFitbScorer<'a> {
    pub model: &'a OutfitModel,
    pub catalog: &'a Catalog,
    pub mode: FitbMode,
    pub batch: usize,
}

impl FitbScorer for ModelFitbScorer<'_> {
    fn mode(&self) -> FitbMode {
        self.mode
    }

    fn score(&self, questions: &[&FitbQuestion]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(questions.len());
        for chunk in questions.chunks(self.batch.max(1)) {
            match self.mode {
                FitbMode::CpScore => {
                    let mut outfits = Vec::with_capacity(chunk.len() * FITB_CANDIDATES);
                    for q in chunk {
                        let partial = self.catalog.resolve(&q.partial)?;
                        for c in self.catalog.resolve(&q.candidates)? {
                            let mut full = partial.clone();
                            full.push(c);
                            outfits.push(full);
                        }
                    }
                    let mut g = Graph::no_grad();
                    let s = self.model.cp_scores(&mut g, &outfits)?;
                    let s = g.value(s).data();
                    let mut offset = 0;
                    for q in chunk {
                        out.push(s[offset..offset + q.candidates.len()].to_vec());
                        offset += q.candidates.len();
                    }
                }
                FitbMode::CirDistance => {
                    let partials = chunk
                        .iter()
                        .map(|q| self.catalog.resolve(&q.partial))
                        .collect::<Result<Vec<_>>>()?;
                    let specs = chunk
                        .iter()
                        .map(|q| {
                            let answer = self.catalog.resolve(&q.candidates[q.answer_index..=q.answer_index])?[0];
                            Ok(TargetSpec::category(answer.fine_category.clone()))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let spec_refs: Vec<&TargetSpec> = specs.iter().collect();
                    let candidates: Vec<&Item> = chunk
                        .iter()
                        .map(|q| self.catalog.resolve(&q.candidates))
                        .collect::<Result<Vec<_>>>()?
                        .concat();
                    let mut g = Graph::no_grad();
                    let t = self.model.cir_targets(&mut g, &partials, &spec_refs)?;
                    let f = self.model.encode_items(&mut g, &candidates)?;
                    let (t, f) = (g.value(t), g.value(f));
                    let mut offset = 0;
                    for (b, q) in chunk.iter().enumerate() {
                        out.push(
                            (0..q.candidates.len())
                                .map(|c| -distance::between(Metric::Euclidean, t.row(b), f.row(offset + c)))
                                .collect(),
                        );
                        offset += q.candidates.len();
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Index of the best score; ties go to the lowest index and are reported.
pub fn argmax_lowest(scores: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    let tie = scores.iter().enumerate().any(|(i, &s)| i != best && s == scores[best]);
    (best, tie)
}

pub fn fitb_accuracy(scorer: &dyn FitbScorer, questions: &[FitbQuestion], seed: u64) -> Result<EvalReport> {
    for q in questions {
        if q.candidates.len() != FITB_CANDIDATES || q.answer_index >= q.candidates.len() {
            return Err(Error::Input(format!(
                "question {} must have {FITB_CANDIDATES} candidates and a valid answer",
                q.outfit_id
            )));
        }
    }
    let refs: Vec<&FitbQuestion> = questions.iter().collect();
    let scores = scorer.score(&refs)?;
    let mode = scorer.mode();
    let mut correct = 0usize;
    let mut ties = 0usize;
    let mut records = Vec::with_capacity(questions.len());
    for (q, s) in questions.iter().zip(&scores) {
        let (chosen, tie) = argmax_lowest(s);
        if tie {
            ties += 1;
            log::debug!("fitb tie for {}; choosing candidate {chosen}", q.outfit_id);
        }
        correct += usize::from(chosen == q.answer_index);
        records.push(QueryRecord::Fitb {
            outfit_id: q.outfit_id.clone(),
            mode,
            chosen,
            answer: q.answer_index,
            tie,
        });
    }
    if ties > 0 {
        log::info!("{ties} fitb questions had tied top scores");
    }
    let accuracy = if questions.is_empty() {
        0.0
    } else {
        correct as f64 / questions.len() as f64
    };
    Ok(EvalReport {
        task: Task::Fitb,
        metrics: BTreeMap::from([(format!("accuracy_{}", mode.as_str()), accuracy)]),
        records,
        skipped: 0,
        config: serde_json::Value::Null,
        seed,
    })
}

/// Both FITB modes in one report.
pub fn evaluate_fitb(
    model: &OutfitModel,
    catalog: &Catalog,
    questions: &[FitbQuestion],
    seed: u64,
) -> Result<EvalReport> {
    let heads = model.heads();
    let mut report = EvalReport {
        task: Task::Fitb,
        metrics: BTreeMap::new(),
        records: Vec::new(),
        skipped: 0,
        config: serde_json::to_value(model.config()).expect("config serializes"),
        seed,
    };
    let modes = [(heads.cp, FitbMode::CpScore), (heads.cir, FitbMode::CirDistance)];
    for (_, mode) in modes.into_iter().filter(|(has, _)| *has) {
        let scorer = ModelFitbScorer {
            model,
            catalog,
            mode,
            batch: 50,
        };
        let part = fitb_accuracy(&scorer, questions, seed)?;
        report.metrics.extend(part.metrics);
        report.records.extend(part.records);
    }
    Ok(report)
}

/// Pessimistic 1-based rank: the target is placed after every candidate at
/// the same distance.
pub fn pessimistic_rank(target: f64, others: impl IntoIterator<Item = f64>) -> usize {
    1 + others.into_iter().filter(|&d| d <= target).count()
}

/// Recall@k over same-category candidates in the index. Queries whose
/// ground truth or partial items are missing are skipped but still count
/// in the denominator.
pub fn recall_at_k(
    model: &OutfitModel,
    index: &EmbeddingIndex,
    catalog: &Catalog,
    queries: &[RetrievalQuery],
    ks: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    if ks.contains(&0) {
        return Err(Error::Input("k must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(queries.len());
    let mut skipped = 0usize;
    let mut valid: Vec<(usize, Vec<&Item>)> = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        match (index.row_of(&q.ground_truth), catalog.resolve(&q.partial)) {
            (Some(_), Ok(partial)) if !partial.is_empty() && !q.target_category.is_empty() => {
                valid.push((qi, partial));
            }
            _ => {}
        }
    }
    let mut ranks: Vec<Option<(usize, usize)>> = vec![None; queries.len()];
    for chunk in valid.chunks(100) {
        let partials: Vec<Vec<&Item>> = chunk.iter().map(|(_, p)| p.clone()).collect();
        let specs: Vec<TargetSpec> = chunk
            .iter()
            .map(|(qi, _)| TargetSpec::category(queries[*qi].target_category.clone()))
            .collect();
        let spec_refs: Vec<&TargetSpec> = specs.iter().collect();
        let mut g = Graph::no_grad();
        let t = model.cir_targets(&mut g, &partials, &spec_refs)?;
        let t = g.value(t);
        for (b, (qi, partial)) in chunk.iter().enumerate() {
            let q = &queries[*qi];
            let gt_row = index.row_of(&q.ground_truth).expect("checked above");
            let Some(rows) = index.category_rows(&q.target_category) else {
                continue;
            };
            if !rows.contains(&gt_row) {
                continue;
            }
            let target = t.row(b);
            let gt_dist = distance::between(Metric::Euclidean, target, index.vector(gt_row));
            let others: Vec<f64> = rows
                .iter()
                .filter(|&&r| r != gt_row && !partial.iter().any(|it| index.entries()[r].item_id == it.item_id))
                .map(|&r| distance::between(Metric::Euclidean, target, index.vector(r)))
                .collect();
            ranks[*qi] = Some((pessimistic_rank(gt_dist, others.iter().copied()), others.len() + 1));
        }
    }
    for (q, rank) in queries.iter().zip(&ranks) {
        if rank.is_none() {
            skipped += 1;
        }
        records.push(QueryRecord::Cir {
            ground_truth: q.ground_truth.clone(),
            rank: rank.map(|(r, _)| r),
            candidates: rank.map_or(0, |(_, c)| c),
        });
    }
    let mut metrics = BTreeMap::new();
    for &k in ks {
        metrics.insert(format!("recall@{k}"), recall_from_records(&records, k));
    }
    Ok(EvalReport {
        task: Task::Cir,
        metrics,
        records,
        skipped,
        config: serde_json::to_value(model.config()).expect("config serializes"),
        seed,
    })
}

/// Fraction of all queries (skipped included) whose rank is at most `k`.
pub fn recall_from_records(records: &[QueryRecord], k: usize) -> f64 {
    let total = records.len();
    if total == 0 {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| matches!(r, QueryRecord::Cir { rank: Some(rank), .. } if *rank <= k))
        .count();
    hits as f64 / total as f64
}
