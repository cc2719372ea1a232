//! Loss kernels over a precomputed similarity matrix.
//!
//! Each kernel returns its value and, when given a gradient buffer, adds
//! `scale * ∂value/∂sims` into it.

use super::batch::LevelBatch;
use super::{ClipDirection, LossError, Result};
use crate::numerics::{log_sigmoid, sigmoid, weighted_log_sum_exp, Accumulator, Matrix};

pub(crate) type GradSink<'a> = Option<(&'a mut Matrix, f64)>;

fn scaled_row(sims: &Matrix, i: usize, inv_tau: f64) -> Vec<f64> {
    sims.row(i).iter().map(|s| s * inv_tau).collect()
}

fn column_log_sum_exp(sims: &Matrix, j: usize, inv_tau: f64) -> f64 {
    let col: Vec<f64> = (0..sims.rows()).map(|n| sims.get(n, j) * inv_tau).collect();
    let ones = vec![1.0; col.len()];
    weighted_log_sum_exp(&col, &ones)
}

/// Single-positive CLIP on each sample's designated text.
pub(crate) fn clip(
    sims: &Matrix,
    level: &LevelBatch,
    level_index: usize,
    tau: f64,
    direction: ClipDirection,
    strict: bool,
    mut grad: GradSink<'_>,
) -> Result<f64> {
    let n = sims.rows();
    if strict {
        if let Some(i) = level.assignments().iter().position(|a| a.len() > 1) {
            return Err(LossError::MultiLabelAmbiguity {
                sample: i,
                level: level_index,
            });
        }
    }
    let inv_tau = 1.0 / tau;
    let counts = level.designated_counts();
    let mut total = Accumulator::default();
    match direction {
        ClipDirection::ImageToText => {
            for i in 0..n {
                let z = scaled_row(sims, i, inv_tau);
                let lse = weighted_log_sum_exp(&z, &counts);
                let d = level.designated(i);
                total.add(lse - z[d]);
                if let Some((g, scale)) = grad.as_mut() {
                    let s = *scale * inv_tau / n as f64;
                    for (j, &c) in counts.iter().enumerate() {
                        if c > 0.0 {
                            g.data_mut()[i * sims.cols() + j] += s * c * (z[j] - lse).exp();
                        }
                    }
                    g.data_mut()[i * sims.cols() + d] -= s;
                }
            }
        }
        ClipDirection::TextToImage => {
            let lse: Vec<f64> = (0..sims.cols())
                .map(|j| {
                    if counts[j] > 0.0 {
                        column_log_sum_exp(sims, j, inv_tau)
                    } else {
                        0.0
                    }
                })
                .collect();
            for i in 0..n {
                let d = level.designated(i);
                total.add(lse[d] - sims.get(i, d) * inv_tau);
            }
            if let Some((g, scale)) = grad.as_mut() {
                let s = *scale * inv_tau / n as f64;
                let cols = sims.cols();
                for (j, &c) in counts.iter().enumerate() {
                    if c > 0.0 {
                        for r in 0..n {
                            g.data_mut()[r * cols + j] +=
                                s * c * (sims.get(r, j) * inv_tau - lse[j]).exp();
                        }
                    }
                }
                for i in 0..n {
                    g.data_mut()[i * cols + level.designated(i)] -= s;
                }
            }
        }
    }
    Ok(total.value() / n as f64)
}

/// Weighted multi-positive contrastive loss, both directions.
///
/// The image-to-text denominator runs over every assigned (sample, text) pair
/// in the batch, so a text assigned to several samples appears with that
/// multiplicity. The text-to-image denominator runs over all batch images.
pub(crate) fn soft_clip(
    sims: &Matrix,
    level: &LevelBatch,
    tau: f64,
    mut grad: GradSink<'_>,
) -> f64 {
    let n = sims.rows();
    let cols = sims.cols();
    let inv_tau = 1.0 / tau;
    let counts = level.pair_counts();
    let pairs = level.total_pairs() as f64;

    let col_lse: Vec<f64> = (0..cols)
        .map(|j| {
            if counts[j] > 0.0 {
                column_log_sum_exp(sims, j, inv_tau)
            } else {
                0.0
            }
        })
        .collect();
    // Total weight pulling each text column in the text-to-image direction.
    let mut column_weight = vec![0.0; cols];

    let mut total = Accumulator::default();
    for i in 0..n {
        let z = scaled_row(sims, i, inv_tau);
        let lse = weighted_log_sum_exp(&z, &counts);
        let assigned = &level.assignments()[i];
        let weights = &level.weights()[i];
        let mut row_weight = 0.0;
        for (&j, &w) in assigned.iter().zip(weights) {
            total.add(w * (lse - z[j]));
            total.add(w * (col_lse[j] - z[j]));
            row_weight += w;
            column_weight[j] += w;
        }
        if let Some((g, scale)) = grad.as_mut() {
            let s = *scale * inv_tau / (2.0 * pairs);
            let row = &mut g.data_mut()[i * cols..(i + 1) * cols];
            for (j, &c) in counts.iter().enumerate() {
                if c > 0.0 {
                    row[j] += s * row_weight * c * (z[j] - lse).exp();
                }
            }
            for (&j, &w) in assigned.iter().zip(weights) {
                row[j] -= 2.0 * s * w;
            }
        }
    }
    if let Some((g, scale)) = grad.as_mut() {
        let s = *scale * inv_tau / (2.0 * pairs);
        for (j, &a) in column_weight.iter().enumerate() {
            if a != 0.0 {
                for r in 0..n {
                    g.data_mut()[r * cols + j] +=
                        s * a * (sims.get(r, j) * inv_tau - col_lse[j]).exp();
                }
            }
        }
    }
    total.value() / (2.0 * pairs)
}

/// Per-pair binary cross-entropy on `logit_scale * sims`, divided by N.
///
/// Only text columns referenced by at least one sample take part.
pub(crate) fn pointwise(
    sims: &Matrix,
    level: &LevelBatch,
    labels: &Matrix,
    logit_scale: f64,
    mut grad: GradSink<'_>,
) -> f64 {
    let n = sims.rows() as f64;
    let cols = sims.cols();
    let active: Vec<usize> = level
        .pair_counts()
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0.0)
        .map(|(j, _)| j)
        .collect();
    let mut total = Accumulator::default();
    for i in 0..sims.rows() {
        for &j in &active {
            let idx = i * cols + j;
            let x = sims.data()[idx] * logit_scale;
            let y = labels.data()[idx];
            total.add(-if y > 0.5 {
                log_sigmoid(x)
            } else {
                log_sigmoid(-x)
            });
            if let Some((g, scale)) = grad.as_mut() {
                g.data_mut()[idx] += *scale * logit_scale * (sigmoid(x) - y) / n;
            }
        }
    }
    total.value() / n
}
