//! Multi-label retrieval metrics: ROC-AUC, average precision, threshold accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{sigmoid, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUC needs at least one positive and one negative ({positives} positives, {negatives} negatives)")]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("average precision needs at least one positive")]
    NoPositives,
    #[error("every category lacks positives or negatives")]
    AllCategoriesDegenerate,
    #[error("scores and truth differ in shape: {scores:?} vs {truth:?}")]
    ShapeMismatch {
        scores: (usize, usize),
        truth: (usize, usize),
    },
    #[error("truth entry {value} at ({row}, {col}) is not 0 or 1")]
    NonBinaryTruth { row: usize, col: usize, value: f64 },
    #[error("score at ({row}, {col}) is not finite")]
    NonFiniteScore { row: usize, col: usize },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn check_vectors(scores: &[f64], truth: &[bool]) -> Result<()> {
    if scores.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch {
            scores: (scores.len(), 1),
            truth: (truth.len(), 1),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore { row: i, col: 0 });
    }
    Ok(())
}

/// Mann-Whitney AUC: `(concordant + 0.5·ties) / (positives · negatives)`.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    check_vectors(scores, truth)?;
    let positives = truth.iter().filter(|t| **t).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateLabels {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk tie groups in ascending score order; every positive beats the
    // negatives seen in earlier groups and ties with those in its own group.
    let (mut concordant, mut ties, mut negatives_below) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group_pos = order[start..end].iter().filter(|&&i| truth[i]).count() as u64;
        let group_neg = (end - start) as u64 - group_pos;
        concordant += group_pos * negatives_below;
        ties += group_pos * group_neg;
        negatives_below += group_neg;
        start = end;
    }
    let pairs = (positives * negatives) as f64;
    Ok((concordant as f64 + 0.5 * ties as f64) / pairs)
}

/// Mean precision at the rank of each positive, ranking by descending score
/// with ties broken by ascending index.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Result<f64> {
    check_vectors(scores, truth)?;
    let positives = truth.iter().filter(|t| **t).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Scores and binary truth, samples × categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabels {
    scores: Matrix,
    truth: Matrix,
}

impl ScoredLabels {
    pub fn new(scores: Matrix, truth: Matrix) -> Result<Self> {
        if (scores.rows(), scores.cols()) != (truth.rows(), truth.cols()) {
            return Err(MetricsError::ShapeMismatch {
                scores: (scores.rows(), scores.cols()),
                truth: (truth.rows(), truth.cols()),
            });
        }
        for r in 0..truth.rows() {
            for c in 0..truth.cols() {
                let v = truth.get(r, c);
                if v != 0.0 && v != 1.0 {
                    return Err(MetricsError::NonBinaryTruth {
                        row: r,
                        col: c,
                        value: v,
                    });
                }
                if !scores.get(r, c).is_finite() {
                    return Err(MetricsError::NonFiniteScore { row: r, col: c });
                }
            }
        }
        Ok(Self { scores, truth })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn truth(&self) -> &Matrix {
        &self.truth
    }

    fn column(&self, c: usize) -> (Vec<f64>, Vec<bool>) {
        let s = (0..self.scores.rows())
            .map(|r| self.scores.get(r, c))
            .collect();
        let t = (0..self.truth.rows())
            .map(|r| self.truth.get(r, c) == 1.0)
            .collect();
        (s, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: usize,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub map: f64,
    pub acc: f64,
    pub per_category: Vec<CategoryMetrics>,
    pub skipped_categories: Vec<usize>,
}

/// Macro AUC and mAP over categories with both classes present, and mean
/// per-category accuracy of `σ(score) ≥ threshold`.
pub fn evaluate(scored: &ScoredLabels, threshold: f64) -> Result<MetricsReport> {
    let mut per_category = Vec::with_capacity(scored.scores.cols());
    let mut skipped = Vec::new();
    let (mut auc_sum, mut ap_sum, mut acc_sum, mut counted) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..scored.scores.cols() {
        let (s, t) = scored.column(c);
        let correct = s
            .iter()
            .zip(&t)
            .filter(|(si, ti)| (sigmoid(**si) >= threshold) == **ti)
            .count();
        let acc = correct as f64 / s.len().max(1) as f64;
        acc_sum += acc;
        let (auc, ap) = match roc_auc(&s, &t) {
            Ok(auc) => {
                let ap = average_precision(&s, &t)?;
                auc_sum += auc;
                ap_sum += ap;
                counted += 1;
                (Some(auc), Some(ap))
            }
            Err(MetricsError::DegenerateLabels { .. }) => {
                log::debug!("category {c} skipped: only one class present");
                skipped.push(c);
                (None, None)
            }
            Err(e) => return Err(e),
        };
        per_category.push(CategoryMetrics {
            category: c,
            auc,
            ap,
            acc,
        });
    }
    if counted == 0 {
        return Err(MetricsError::AllCategoriesDegenerate);
    }
    Ok(MetricsReport {
        auc: auc_sum / counted as f64,
        map: ap_sum / counted as f64,
        acc: acc_sum / scored.scores.cols() as f64,
        per_category,
        skipped_categories: skipped,
    })
}
