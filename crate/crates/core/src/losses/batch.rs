use serde::Serialize;

use super::{LossError, Result};
use crate::annotations::{weights_for, SampleAnnotation, WeightsMode};
use crate::numerics::{norm, row_normalize, Matrix, MIN_ROW_NORM};

/// Texts of one granularity level and each sample's assignment into them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelBatch {
    texts: Matrix,
    assignments: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
}

impl LevelBatch {
    /// `assignments[i]` lists the text rows assigned to sample i (its first
    /// entry is the designated text); `weights[i]` holds the matching `w_ik`.
    pub fn new(
        texts: Matrix,
        assignments: Vec<Vec<usize>>,
        weights: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if assignments.len() != weights.len() {
            return Err(LossError::InvalidBatch(format!(
                "{} assignment lists but {} weight lists",
                assignments.len(),
                weights.len()
            )));
        }
        for (i, (a, w)) in assignments.iter().zip(&weights).enumerate() {
            if a.is_empty() {
                return Err(LossError::InvalidBatch(format!("sample {i} has no texts")));
            }
            if a.len() != w.len() {
                return Err(LossError::InvalidBatch(format!(
                    "sample {i}: {} texts but {} weights",
                    a.len(),
                    w.len()
                )));
            }
            for (k, &row) in a.iter().enumerate() {
                if row >= texts.rows() {
                    return Err(LossError::InvalidBatch(format!(
                        "sample {i} references text row {row} of {}",
                        texts.rows()
                    )));
                }
                if a[..k].contains(&row) {
                    return Err(LossError::InvalidBatch(format!(
                        "sample {i} references text row {row} twice"
                    )));
                }
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(LossError::InvalidBatch(format!(
                    "sample {i} has a negative or non-finite weight"
                )));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(LossError::InvalidBatch(format!(
                    "sample {i} weights sum to {total}"
                )));
            }
        }
        Ok(Self {
            texts,
            assignments,
            weights,
        })
    }

    /// Uniform weights `1 / M_i`.
    pub fn uniform(texts: Matrix, assignments: Vec<Vec<usize>>) -> Result<Self> {
        let weights = assignments
            .iter()
            .map(|a| vec![1.0 / a.len().max(1) as f64; a.len()])
            .collect();
        Self::new(texts, assignments, weights)
    }

    pub fn texts(&self) -> &Matrix {
        &self.texts
    }

    pub fn texts_mut(&mut self) -> &mut Matrix {
        &mut self.texts
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Designated (first assigned) text of sample `i`.
    pub fn designated(&self, i: usize) -> usize {
        self.assignments[i][0]
    }

    /// Number of (sample, text) pairs referencing each text row.
    pub(crate) fn pair_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.texts.rows()];
        for a in &self.assignments {
            for &j in a {
                counts[j] += 1.0;
            }
        }
        counts
    }

    /// Number of samples designating each text row.
    pub(crate) fn designated_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.texts.rows()];
        for a in &self.assignments {
            counts[a[0]] += 1.0;
        }
        counts
    }

    /// Total number of assigned pairs, `Σ M_i`.
    pub fn total_pairs(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }
}

/// Image embeddings plus one [`LevelBatch`] per granularity level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentBatch {
    images: Matrix,
    levels: Vec<LevelBatch>,
}

impl AlignmentBatch {
    pub fn new(images: Matrix, levels: Vec<LevelBatch>) -> Result<Self> {
        if images.rows() == 0 {
            return Err(LossError::EmptyBatch);
        }
        if levels.is_empty() {
            return Err(LossError::InvalidBatch("batch has no levels".into()));
        }
        for (g, level) in levels.iter().enumerate() {
            if level.assignments.len() != images.rows() {
                return Err(LossError::InvalidBatch(format!(
                    "level {g} annotates {} samples, batch has {}",
                    level.assignments.len(),
                    images.rows()
                )));
            }
            if level.texts.cols() != images.cols() {
                return Err(LossError::InvalidBatch(format!(
                    "level {g} texts have dimension {}, images {}",
                    level.texts.cols(),
                    images.cols()
                )));
            }
        }
        Ok(Self { images, levels })
    }

    /// Builds a batch from annotations and embeddings; rows are normalized and
    /// weights derived per `mode` over exactly these samples.
    pub fn from_annotations(
        annotations: &[SampleAnnotation],
        images: &Matrix,
        texts: &[Matrix],
        mode: WeightsMode,
    ) -> Result<Self> {
        if annotations.len() != images.rows() {
            return Err(LossError::InvalidBatch(format!(
                "{} annotations for {} images",
                annotations.len(),
                images.rows()
            )));
        }
        let levels = texts.len();
        let mut level_batches = Vec::with_capacity(levels);
        for (g, t) in texts.iter().enumerate() {
            if annotations
                .iter()
                .any(|a| a.labels_per_level.len() != levels)
            {
                return Err(LossError::InvalidBatch(
                    "annotation level count differs from text matrices".into(),
                ));
            }
            let assignments = annotations
                .iter()
                .map(|a| a.labels_per_level[g].clone())
                .collect();
            let weights = weights_for(annotations, g, levels, mode)?.into_rows();
            level_batches.push(LevelBatch::new(row_normalize(t)?, assignments, weights)?);
        }
        Self::new(row_normalize(images)?, level_batches)
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn images_mut(&mut self) -> &mut Matrix {
        &mut self.images
    }

    /// Replaces the image embeddings; the shape must not change.
    pub fn set_images(&mut self, images: Matrix) -> Result<()> {
        if images.rows() != self.images.rows() || images.cols() != self.images.cols() {
            return Err(LossError::InvalidBatch("image shape changed".into()));
        }
        self.images = images;
        Ok(())
    }

    pub fn levels(&self) -> &[LevelBatch] {
        &self.levels
    }

    pub fn level(&self, g: usize) -> Result<&LevelBatch> {
        self.levels.get(g).ok_or(LossError::LevelOutOfRange {
            level: g,
            levels: self.levels.len(),
        })
    }

    pub fn level_mut(&mut self, g: usize) -> &mut LevelBatch {
        &mut self.levels[g]
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }

    pub fn granularity(&self) -> usize {
        self.levels.len()
    }

    /// Binary `y_ij`: 1 exactly when text j is assigned to sample i at `level`.
    pub fn match_labels(&self, level: usize) -> Result<Matrix> {
        let lvl = self.level(level)?;
        let mut y = Matrix::zeros(self.len(), lvl.texts.rows());
        for (i, a) in lvl.assignments.iter().enumerate() {
            for &j in a {
                y.set(i, j, 1.0);
            }
        }
        Ok(y)
    }
}

/// Unit-normalized copies of one side's rows with their original norms.
#[derive(Debug, Clone)]
pub(crate) struct NormalizedRows {
    pub unit: Matrix,
    pub norms: Vec<f64>,
}

impl NormalizedRows {
    fn new(m: &Matrix, role: &str) -> Result<Self> {
        let mut unit = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let row = unit.row_mut(i);
            let n = norm(row);
            if !(n >= MIN_ROW_NORM && n.is_finite()) {
                return Err(LossError::DegenerateEmbedding {
                    role: role.to_string(),
                    row: i,
                });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(Self { unit, norms })
    }
}

/// Cosine similarities between images and every level's texts.
#[derive(Debug, Clone)]
pub(crate) struct Cosines {
    pub images: NormalizedRows,
    pub texts: Vec<NormalizedRows>,
    pub sims: Vec<Matrix>,
}

impl Cosines {
    pub fn new(batch: &AlignmentBatch) -> Result<Self> {
        let images = NormalizedRows::new(&batch.images, "images")?;
        let mut texts = Vec::with_capacity(batch.levels.len());
        let mut sims = Vec::with_capacity(batch.levels.len());
        for (g, level) in batch.levels.iter().enumerate() {
            let t = NormalizedRows::new(&level.texts, &format!("texts[{g}]"))?;
            sims.push(crate::numerics::similarity_matrix(&images.unit, &t.unit)?);
            texts.push(t);
        }
        Ok(Self {
            images,
            texts,
            sims,
        })
    }
}
