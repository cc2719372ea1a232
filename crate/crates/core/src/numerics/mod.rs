//! Dense row-major matrices and the numerically stable scalar kernels every
//! loss is built from.
//!
//! Everything here is `f64`. Reductions run left to right in a fixed order so
//! results are reproducible bit for bit.

pub mod mgem;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rows whose Euclidean norm falls below this are treated as zero.
pub const MIN_ROW_NORM: f64 = 1e-300;

/// Tolerance used when validating that a vector is a probability distribution.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
}

/// Row-major dense matrix of `f64` with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry; zero for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, NumericsError> {
        if probs.is_empty() {
            return Err(NumericsError::EmptyInput);
        }
        if let Some(index) = probs.iter().position(|p| !p.is_finite()) {
            return Err(NumericsError::NonFinite { index });
        }
        if let Some(p) = probs.iter().find(|p| **p < 0.0) {
            return Err(NumericsError::NotADistribution(format!(
                "negative entry {p}"
            )));
        }
        let total = compensated_sum(&probs);
        if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(NumericsError::NotADistribution(format!(
                "entries sum to {total}"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Half the L1 distance to `other`.
    pub fn total_variation(&self, other: &ProbabilityVector) -> f64 {
        0.5 * self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales every row to unit Euclidean norm.
pub fn row_normalize(m: &Matrix) -> Result<Matrix, NumericsError> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if !(n >= MIN_ROW_NORM) {
            return Err(NumericsError::ZeroRow { row: i });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// `out[i][j] = a[i] · b[j]`. Cosine similarity when both inputs have unit rows.
pub fn similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    if a.cols() != b.cols() {
        return Err(NumericsError::DimensionMismatch {
            expected: a.cols(),
            found: b.cols(),
        });
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            out.set(i, j, dot(ai, b.row(j)));
        }
    }
    Ok(out)
}

/// Max-shifted softmax.
pub fn stable_softmax(logits: &[f64]) -> Result<ProbabilityVector, NumericsError> {
    let probs = softmax_unchecked(logits)?;
    Ok(ProbabilityVector(probs))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Result<Vec<f64>, NumericsError> {
    let max = max_finite(logits)?;
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// `log Σ exp(z)` via the max-shift identity.
pub fn log_sum_exp(logits: &[f64]) -> Result<f64, NumericsError> {
    let max = max_finite(logits)?;
    let total: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    Ok(max + total.ln())
}

/// `log Σ c_j exp(z_j)` for non-negative multiplicities; zero-count entries are ignored.
pub(crate) fn weighted_log_sum_exp(logits: &[f64], counts: &[f64]) -> f64 {
    let max = logits
        .iter()
        .zip(counts)
        .filter(|(_, c)| **c > 0.0)
        .fold(f64::NEG_INFINITY, |m, (z, _)| m.max(*z));
    let total: f64 = logits
        .iter()
        .zip(counts)
        .filter(|(_, c)| **c > 0.0)
        .map(|(z, c)| c * (z - max).exp())
        .fold(Accumulator::default(), |mut a, v| {
            a.add(v);
            a
        })
        .value();
    max + total.ln()
}

fn max_finite(logits: &[f64]) -> Result<f64, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    let mut max = f64::NEG_INFINITY;
    for (index, z) in logits.iter().enumerate() {
        if !z.is_finite() {
            return Err(NumericsError::NonFinite { index });
        }
        max = max.max(*z);
    }
    Ok(max)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log σ(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Running Neumaier-compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Accumulator {
    sum: f64,
    compensation: f64,
}

impl Accumulator {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.compensation += (self.sum - t) + v;
        } else {
            self.compensation += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Neumaier-compensated summation in input order.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut acc = Accumulator::default();
    values.iter().for_each(|v| acc.add(*v));
    acc.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four_five() {
        let m = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let n = row_normalize(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_unit_row_is_identity() {
        let m = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]).unwrap();
        assert_eq!(row_normalize(&m).unwrap(), m);
    }

    #[test]
    fn normalize_zero_row_fails() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(row_normalize(&m), Err(NumericsError::ZeroRow { row: 1 }));
    }

    #[test]
    fn matrix_rejects_bad_shapes_and_nan() {
        assert!(matches!(
            Matrix::new(2, 2, vec![0.0; 3]),
            Err(NumericsError::ShapeMismatch { .. })
        ));
        assert_eq!(
            Matrix::new(1, 2, vec![0.0, f64::NAN]),
            Err(NumericsError::NonFinite { index: 1 })
        );
    }

    #[test]
    fn similarity_examples() {
        let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let s = similarity_matrix(&eye, &eye).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = Matrix::from_rows(&[[0.6, 0.8]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!((similarity_matrix(&a, &b).unwrap().get(0, 0) - 0.6).abs() < 1e-15);

        let c = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            similarity_matrix(&a, &c),
            Err(NumericsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(stable_softmax(&[0.0, 0.0]).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(stable_softmax(&[42.0]).unwrap().probs(), &[1.0]);
        let p = stable_softmax(&[0.0, 1.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((p.probs()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.probs()[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p.probs()[0] - 0.268941).abs() < 1e-6);
        assert!((p.probs()[1] - 0.731059).abs() < 1e-6);
        assert_eq!(stable_softmax(&[]), Err(NumericsError::EmptyInput));
    }

    #[test]
    fn log_sum_exp_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - ln2).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[1000.0, 1000.0]).unwrap(), 1000.0 + ln2);
        assert_eq!(log_sum_exp(&[-7.5]).unwrap(), -7.5);
        assert_eq!(log_sum_exp(&[]), Err(NumericsError::EmptyInput));
        let big = log_sum_exp(&[700.0, -700.0, 699.0]).unwrap();
        assert!(big.is_finite());
    }

    #[test]
    fn log_sigmoid_examples() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        let lo = log_sigmoid(-1000.0);
        assert!(lo.is_finite());
        assert!((lo + 1000.0).abs() < 1e-12);
        let hi = log_sigmoid(1000.0);
        assert!(hi <= 0.0 && hi > -1e-300);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for x in [-30.0, -1.0, 0.0, 0.5, 20.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn compensated_sum_examples() {
        assert_eq!(compensated_sum(&[1e16, 1.0, -1e16]), 1.0);
        assert_eq!(compensated_sum(&[]), 0.0);
        let tenths = vec![0.1; 1_000_000];
        assert!((compensated_sum(&tenths) - 100_000.0).abs() < 1e-6);
    }

    #[test]
    fn weighted_lse_matches_repeated_entries() {
        let z = [0.3, -1.2, 2.0];
        let counts = [2.0, 0.0, 1.0];
        let expanded = [0.3, 0.3, 2.0];
        let a = weighted_log_sum_exp(&z, &counts);
        let b = log_sum_exp(&expanded).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.25; 4]).is_ok());
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbabilityVector::new(vec![]).is_err());
    }

    fn logits() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0..50.0f64, 1..32)
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(z in logits(), c in -500.0..500.0f64) {
            let p = stable_softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = stable_softmax(&shifted).unwrap();
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn log_sum_exp_bounds(z in logits()) {
            let lse = log_sum_exp(&z).unwrap();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse >= max);
            prop_assert!(lse <= max + (z.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn log_sigmoid_monotone(a in -800.0..800.0f64, b in -800.0..800.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(log_sigmoid(lo) <= log_sigmoid(hi));
            prop_assert!(log_sigmoid(lo).is_finite());
        }

        #[test]
        fn similarity_self_has_unit_diagonal(
            rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 6), 1..8)
        ) {
            let m = Matrix::from_rows(&rows).unwrap();
            prop_assume!(m.iter_rows().all(|r| norm(r) > 1e-6));
            let n = row_normalize(&m).unwrap();
            let s = similarity_matrix(&n, &n).unwrap();
            for i in 0..s.rows() {
                prop_assert!((s.get(i, i) - 1.0).abs() < 1e-12);
                prop_assert!((norm(n.row(i)) - 1.0).abs() < 1e-12);
            }
            for v in s.data() {
                prop_assert!(v.abs() <= 1.0 + 1e-9);
            }
        }

        #[test]
        fn compensated_sum_is_deterministic(v in prop::collection::vec(-1e12..1e12f64, 0..64)) {
            prop_assert_eq!(compensated_sum(&v).to_bits(), compensated_sum(&v).to_bits());
        }
    }
}
