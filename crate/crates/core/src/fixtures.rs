//! Small hand-built batches and seeded random batches.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::losses::{AlignmentBatch, LevelBatch, Result};
use crate::numerics::Matrix;

fn basis(dim: usize, axes: &[usize]) -> Matrix {
    let mut m = Matrix::zeros(axes.len(), dim);
    for (r, &a) in axes.iter().enumerate() {
        m.set(r, a, 1.0);
    }
    m
}

/// Two samples, one level, similarity matrix `[[1, 0], [0, 1]]`.
pub fn diagonal_pair() -> AlignmentBatch {
    let level =
        LevelBatch::uniform(basis(2, &[0, 1]), vec![vec![0], vec![1]]).expect("valid fixture");
    AlignmentBatch::new(basis(2, &[0, 1]), vec![level]).expect("valid fixture")
}

/// Two samples, one level, every similarity exactly 0.
pub fn zero_logit_pair() -> AlignmentBatch {
    let level =
        LevelBatch::uniform(basis(4, &[2, 3]), vec![vec![0], vec![1]]).expect("valid fixture");
    AlignmentBatch::new(basis(4, &[0, 1]), vec![level]).expect("valid fixture")
}

/// Diagonal pair repeated at two levels with identical texts, so every level
/// yields the same distributions.
pub fn identical_levels() -> AlignmentBatch {
    let level =
        LevelBatch::uniform(basis(2, &[0, 1]), vec![vec![0], vec![1]]).expect("valid fixture");
    AlignmentBatch::new(basis(2, &[0, 1]), vec![level.clone(), level]).expect("valid fixture")
}

/// Single sample with a single text.
pub fn single_pair() -> AlignmentBatch {
    let level = LevelBatch::uniform(basis(3, &[1]), vec![vec![0]]).expect("valid fixture");
    let images = Matrix::from_rows(&[[0.6, 0.8, 0.0]]).expect("finite");
    AlignmentBatch::new(images, vec![level]).expect("valid fixture")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomBatchSpec {
    pub samples: usize,
    pub dim: usize,
    pub levels: usize,
    /// Text rows per level.
    pub texts: usize,
    /// Upper bound on texts assigned to one sample at one level.
    pub max_labels: usize,
    /// Random simplex weights instead of uniform ones.
    pub random_weights: bool,
    /// Leave embeddings unnormalized (norms drawn from 0.5..2).
    pub unnormalized: bool,
    pub seed: u64,
}

impl Default for RandomBatchSpec {
    fn default() -> Self {
        Self {
            samples: 8,
            dim: 16,
            levels: 2,
            texts: 6,
            max_labels: 3,
            random_weights: true,
            unnormalized: true,
            seed: 0,
        }
    }
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize, unnormalized: bool) -> Matrix {
    let mut m = Matrix::zeros(rows, dim);
    for r in 0..rows {
        let row = m.row_mut(r);
        row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        let n = crate::numerics::norm(row);
        let target = if unnormalized {
            rng.random_range(0.5..2.0)
        } else {
            1.0
        };
        row.iter_mut().for_each(|v| *v *= target / n);
    }
    m
}

/// Seeded batch with Gaussian embeddings and random multi-label assignments.
pub fn random_batch(spec: &RandomBatchSpec) -> Result<AlignmentBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let images = gaussian_rows(&mut rng, spec.samples, spec.dim, spec.unnormalized);
    let max_labels = spec.max_labels.clamp(1, spec.texts.max(1));
    let mut levels = Vec::with_capacity(spec.levels);
    for _ in 0..spec.levels {
        let texts = gaussian_rows(&mut rng, spec.texts, spec.dim, spec.unnormalized);
        let mut assignments = Vec::with_capacity(spec.samples);
        let mut weights = Vec::with_capacity(spec.samples);
        for _ in 0..spec.samples {
            let count = rng.random_range(1..=max_labels);
            let a = index::sample(&mut rng, spec.texts, count).into_vec();
            let w: Vec<f64> = if spec.random_weights {
                let raw: Vec<f64> = (0..count).map(|_| rng.random_range(0.1..1.0)).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / total).collect()
            } else {
                vec![1.0 / count as f64; count]
            };
            assignments.push(a);
            weights.push(w);
        }
        levels.push(LevelBatch::new(texts, assignments, weights)?);
    }
    AlignmentBatch::new(images, levels)
}
