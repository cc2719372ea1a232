//! Seeded two-level (coarse / fine) synthetic corpora.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{EmbeddingMatrices, Manifest, TextEntry};
use super::{AnnotationError, GranularitySchema, LevelDescriptor, Result, SampleAnnotation};
use crate::numerics::{mgem, norm, Matrix};

pub const COARSE_LEVEL: usize = 0;
pub const FINE_LEVEL: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub dim: usize,
    pub coarse_labels: usize,
    pub fine_per_coarse: usize,
    pub labels_per_sample: usize,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 2000,
            dim: 64,
            coarse_labels: 8,
            fine_per_coarse: 3,
            labels_per_sample: 2,
            noise_sigma: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn fine_labels(&self) -> usize {
        self.coarse_labels * self.fine_per_coarse
    }

    /// Coarse parent of a fine label.
    pub fn parent(&self, fine: usize) -> usize {
        fine / self.fine_per_coarse
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(AnnotationError::InvalidSpec(msg));
        if self.dim < 2 {
            return fail(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.coarse_labels < 2 {
            return fail(format!(
                "coarse_labels must be at least 2, got {}",
                self.coarse_labels
            ));
        }
        if self.fine_per_coarse < 1 {
            return fail("fine_per_coarse must be at least 1".into());
        }
        if self.labels_per_sample < 1 || self.labels_per_sample > self.fine_labels() {
            return fail(format!(
                "labels_per_sample must be in 1..={}, got {}",
                self.fine_labels(),
                self.labels_per_sample
            ));
        }
        if self.n_samples < 1 {
            return fail("n_samples must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            ));
        }
        if u32::try_from(self.dim).is_err() {
            return fail("dim too large".into());
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates a two-level corpus.
///
/// Level 0 holds the coarse labels, level 1 the fine labels; fine label `f`
/// is a child of coarse label `f / fine_per_coarse`. Each sample draws
/// `labels_per_sample` distinct fine labels (the first drawn is its designated
/// label) and inherits their parents in first-seen order. Its embedding is the
/// normalized sum of its fine anchors plus isotropic Gaussian noise, normalized
/// again. Text embeddings are the anchors themselves. All vectors are rounded
/// to `f32` so they survive an MGEM round trip unchanged.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Manifest, EmbeddingMatrices)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let fine_total = spec.fine_labels();

    let coarse_anchors: Vec<Vec<f64>> = (0..spec.coarse_labels)
        .map(|_| unit_gaussian(&mut rng, d))
        .collect();
    let fine_anchors: Vec<Vec<f64>> = (0..fine_total)
        .map(|_| unit_gaussian(&mut rng, d))
        .collect();

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut image_rows = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let fine: Vec<usize> =
            index::sample(&mut rng, fine_total, spec.labels_per_sample).into_vec();
        let mut coarse: Vec<usize> = Vec::new();
        for &f in &fine {
            let p = spec.parent(f);
            if !coarse.contains(&p) {
                coarse.push(p);
            }
        }

        let mut signal = vec![0.0; d];
        for &f in &fine {
            signal
                .iter_mut()
                .zip(&fine_anchors[f])
                .for_each(|(s, a)| *s += a);
        }
        let n = norm(&signal);
        if n > 1e-12 {
            signal.iter_mut().for_each(|s| *s /= n);
        }
        let mut row: Vec<f64> = if spec.noise_sigma > 0.0 {
            signal
                .iter()
                .map(|s| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s + spec.noise_sigma * z
                })
                .collect()
        } else {
            signal
        };
        let n = norm(&row);
        if n > 1e-12 {
            row.iter_mut().for_each(|s| *s /= n);
        }
        image_rows.push(row);
        samples.push(SampleAnnotation {
            sample_id: format!("s{i:05}"),
            labels_per_level: vec![coarse, fine],
        });
    }

    let schema = GranularitySchema::new(vec![
        LevelDescriptor {
            name: "coarse".into(),
            vocab: (0..spec.coarse_labels)
                .map(|c| format!("coarse_{c}"))
                .collect(),
        },
        LevelDescriptor {
            name: "fine".into(),
            vocab: (0..fine_total)
                .map(|f| format!("fine_{}_{}", spec.parent(f), f % spec.fine_per_coarse))
                .collect(),
        },
    ])?;
    let sample_embeddings = (0..spec.n_samples)
        .map(|i| Some(format!("embeddings/sample_{i:05}.mgem")))
        .collect();
    let texts = (0..spec.coarse_labels)
        .map(|c| (COARSE_LEVEL, c))
        .chain((0..fine_total).map(|f| (FINE_LEVEL, f)))
        .map(|(level, label)| TextEntry {
            level,
            label,
            embedding: format!("embeddings/text_{level}_{label:04}.mgem"),
        })
        .collect();
    let manifest = Manifest::new(schema, samples, sample_embeddings, texts)?;

    let to_matrix = |rows: &[Vec<f64>]| {
        let mut m = Matrix::from_rows(rows).expect("generated rows are finite and equal length");
        mgem::quantize(&mut m);
        m
    };
    let embeddings = EmbeddingMatrices {
        images: to_matrix(&image_rows),
        texts: vec![to_matrix(&coarse_anchors), to_matrix(&fine_anchors)],
    };
    Ok((manifest, embeddings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn same_seed_same_manifest() {
        let spec = SyntheticSpec {
            n_samples: 50,
            ..Default::default()
        };
        let (a, ea) = generate_synthetic(&spec).unwrap();
        let (b, eb) = generate_synthetic(&spec).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(ea, eb);
        let (c, _) = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn noiseless_single_label_equals_anchor() {
        let spec = SyntheticSpec {
            n_samples: 40,
            dim: 16,
            labels_per_sample: 1,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let (m, e) = generate_synthetic(&spec).unwrap();
        for (i, s) in m.samples.iter().enumerate() {
            let f = s.labels_per_level[FINE_LEVEL][0];
            assert_eq!(e.images.row(i), e.texts[FINE_LEVEL].row(f));
        }
    }

    #[test]
    fn default_spec_structure() {
        let spec = SyntheticSpec::default();
        let (m, e) = generate_synthetic(&spec).unwrap();
        assert_eq!(m.len(), 2000);
        assert_eq!(m.schema.vocab_len(COARSE_LEVEL), 8);
        assert_eq!(m.schema.vocab_len(FINE_LEVEL), 24);
        assert_eq!((e.images.rows(), e.images.cols()), (2000, 64));
        for s in &m.samples {
            let fine = &s.labels_per_level[FINE_LEVEL];
            assert_eq!(fine.len(), spec.labels_per_sample);
            let parents: BTreeSet<usize> = fine.iter().map(|&f| spec.parent(f)).collect();
            let coarse: BTreeSet<usize> =
                s.labels_per_level[COARSE_LEVEL].iter().copied().collect();
            assert_eq!(parents, coarse);
            assert_eq!(s.labels_per_level[COARSE_LEVEL][0], spec.parent(fine[0]));
        }
        for r in e.images.iter_rows().chain(e.texts[1].iter_rows()) {
            assert!((norm(r) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec {
                dim: 1,
                ..Default::default()
            },
            SyntheticSpec {
                coarse_labels: 1,
                ..Default::default()
            },
            SyntheticSpec {
                labels_per_sample: 0,
                ..Default::default()
            },
            SyntheticSpec {
                labels_per_sample: 25,
                ..Default::default()
            },
            SyntheticSpec {
                noise_sigma: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                generate_synthetic(&spec),
                Err(AnnotationError::InvalidSpec(_))
            ));
        }
    }
}
