//! Binary classification metrics for episode evaluation.
//!
//! ROC-AUC uses the rank form of the Mann-Whitney statistic so tied scores
//! contribute half a win per pair. PR-AUC is average precision with ties
//! broken by original index. F1 thresholds nothing itself; callers pass
//! hard predictions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("metric is undefined: {0}")]
    Undefined(&'static str),
}

/// Mean, population standard deviation, and sample count for one metric
/// across evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Result<MetricSummary, MetricError> {
        if values.is_empty() {
            return Err(MetricError::Undefined("summary needs at least one value"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(MetricSummary {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

/// Per-metric summaries keyed by metric name. BTreeMap keeps serialized
/// reports byte-stable across runs.
pub type MetricReport = BTreeMap<String, MetricSummary>;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(MetricError::NonFiniteScore(i));
        }
    }
    Ok(())
}

/// Area under the ROC curve: the probability a positive outscores a
/// negative, counting ties as half. Needs both classes present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined(
            "roc-auc needs at least one positive and one negative label",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average 1-based ranks over runs of tied scores, then sum the ranks
    // held by positives. U = R+ - P(P+1)/2.
    let mut rank_sum_pos = 0.0;
    let mut lo = 0;
    while lo < order.len() {
        let mut hi = lo;
        while hi + 1 < order.len() && scores[order[hi + 1]] == scores[order[lo]] {
            hi += 1;
        }
        let avg_rank = (lo + hi) as f64 / 2.0 + 1.0;
        for &idx in &order[lo..=hi] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        lo = hi + 1;
    }

    let p = pos as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * neg as f64))
}

/// Average precision: examples are ranked by score descending (ties keep
/// input order) and precision is averaged over the ranks that hold
/// positives. Needs at least one positive.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 {
        return Err(MetricError::Undefined(
            "pr-auc needs at least one positive label",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

/// F1 over hard predictions: 2TP / (2TP + FP + FN), defined as 0 when the
/// denominator vanishes (no predicted or actual positives).
pub fn f1(predictions: &[u8], labels: &[u8]) -> Result<f64, MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fnn = 0u64;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fnn += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}
