//! Focal loss for compatibility training and the set-wise outfit ranking loss
//! for retrieval training.
//!
//! The scalar functions here are the reference definitions; the graph ops in
//! [`crate::nn::Graph`] call into the same term functions so the training path
//! and the reference cannot drift apart.

use serde::{Deserialize, Serialize};

use crate::distance::{self, Metric};
use crate::error::{Error, Result};

/// Scores are clamped into `[SCORE_CLAMP, 1 - SCORE_CLAMP]` before the log.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.5 }
    }
}

/// Loss and d(loss)/d(score) for one prediction.
pub fn focal_terms(score: f64, label: u8, gamma: f64, alpha: f64) -> Result<(f64, f64)> {
    let (p_t, alpha_t, sign) = match label {
        1 => (score, alpha, 1.0),
        0 => (1.0 - score, 1.0 - alpha, -1.0),
        other => return Err(Error::Input(format!("label {other} is not 0 or 1"))),
    };
    let clamped = p_t.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let q = 1.0 - clamped;
    let log_p = clamped.ln();
    let loss = -alpha_t * q.powf(gamma) * log_p;
    let grad = if clamped != p_t {
        0.0
    } else {
        let modulating = if gamma == 0.0 {
            0.0
        } else {
            -gamma * q.powf(gamma - 1.0) * log_p
        };
        -alpha_t * (modulating + q.powf(gamma) / clamped) * sign
    };
    Ok((loss, grad))
}

/// Mean focal loss over a batch of `(score, label)` pairs.
pub fn focal_loss(scores: &[f64], labels: &[u8], config: FocalConfig) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Input(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        total += focal_terms(s, y, config.gamma, config.alpha)?.0;
    }
    Ok(total / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingComponents {
    /// Mean hinge over all sampled negatives only.
    All,
    /// Mean hinge over all negatives plus the hinge on the nearest negative.
    #[default]
    AllPlusHard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingConfig {
    pub margin: f64,
    pub metric: Metric,
    pub components: RankingComponents,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            margin: 2.0,
            metric: Metric::Euclidean,
            components: RankingComponents::AllPlusHard,
        }
    }
}

/// One training instance: target embedding, positive and sampled negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingBatchItem {
    pub t: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingTerms {
    pub loss: f64,
    pub all: f64,
    pub hard: f64,
    /// d(loss)/d(d(t, positive))
    pub coef_pos: f64,
    /// d(loss)/d(d(t, negative_j))
    pub coef_neg: Vec<f64>,
}

/// Evaluates the ranking loss with exactly `1 + |negatives|` distance
/// computations. Hinges are active only for strictly positive arguments.
pub fn ranking_terms(
    t: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    config: &RankingConfig,
) -> Result<RankingTerms> {
    if negatives.is_empty() {
        return Err(Error::Input("ranking loss needs at least one negative".into()));
    }
    if config.margin <= 0.0 {
        return Err(Error::Config(format!("margin {} must be positive", config.margin)));
    }
    let d = t.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::Input(format!(
            "dimension mismatch: t has {d}, positive {}, negatives {:?}",
            positive.len(),
            negatives.iter().map(|n| n.len()).collect::<Vec<_>>()
        )));
    }
    let s = negatives.len() as f64;
    let d_pos = distance::between(config.metric, t, positive);
    let d_neg: Vec<f64> = negatives
        .iter()
        .map(|n| distance::between(config.metric, t, n))
        .collect();

    let mut all = 0.0;
    let mut coef_pos = 0.0;
    let mut coef_neg = vec![0.0; negatives.len()];
    for (j, &dn) in d_neg.iter().enumerate() {
        let arg = d_pos - dn + config.margin;
        if arg > 0.0 {
            all += arg / s;
            coef_pos += 1.0 / s;
            coef_neg[j] -= 1.0 / s;
        }
    }

    let mut hard = 0.0;
    if config.components == RankingComponents::AllPlusHard {
        let (j_min, d_min) =
            d_neg.iter().copied().enumerate().fold(
                (0, f64::INFINITY),
                |best, (j, dn)| if dn < best.1 { (j, dn) } else { best },
            );
        let arg = d_pos - d_min + config.margin;
        if arg > 0.0 {
            hard = arg;
            coef_pos += 1.0;
            coef_neg[j_min] -= 1.0;
        }
    }

    Ok(RankingTerms {
        loss: all + hard,
        all,
        hard,
        coef_pos,
        coef_neg,
    })
}

pub fn setwise_ranking_loss(item: &RankingBatchItem, config: &RankingConfig) -> Result<f64> {
    let negatives: Vec<&[f64]> = item.negatives.iter().map(Vec::as_slice).collect();
    Ok(ranking_terms(&item.t, &item.positive, &negatives, config)?.loss)
}
