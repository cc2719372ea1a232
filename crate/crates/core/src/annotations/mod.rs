//! Multi-granular label schema, per-sample annotations and the normalized
//! alignment weights derived from label co-occurrence.

mod manifest;
mod synthetic;

pub use manifest::{ingest_manifest, save_dataset, EmbeddingMatrices, Manifest, TextEntry};
pub use synthetic::{generate_synthetic, SyntheticSpec, COARSE_LEVEL, FINE_LEVEL};

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::mgem::MgemError;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("sample {0} has no positive co-occurrence count")]
    AllZeroCounts(String),
    #[error("invalid co-occurrence count for sample {sample}: {value}")]
    InvalidCount { sample: String, value: f64 },
    #[error("level {level} out of range ({levels} levels)")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("missing embedding file {0}")]
    MissingEmbeddingFile(PathBuf),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mgem(#[from] MgemError),
}

type Result<T> = std::result::Result<T, AnnotationError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelDescriptor {
    pub name: String,
    pub vocab: Vec<String>,
}

/// Ordered granularity levels, each with its own label vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GranularitySchema {
    levels: Vec<LevelDescriptor>,
}

impl GranularitySchema {
    pub fn new(levels: Vec<LevelDescriptor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(AnnotationError::SchemaViolation(
                "schema has no levels".into(),
            ));
        }
        for (g, level) in levels.iter().enumerate() {
            if level.vocab.is_empty() {
                return Err(AnnotationError::SchemaViolation(format!(
                    "level {g} ({}) has an empty vocabulary",
                    level.name
                )));
            }
            let mut seen = HashSet::new();
            for label in &level.vocab {
                if !seen.insert(label.as_str()) {
                    return Err(AnnotationError::SchemaViolation(format!(
                        "label {label:?} repeated in level {g}"
                    )));
                }
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[LevelDescriptor] {
        &self.levels
    }

    /// Number of granularity levels.
    pub fn granularity(&self) -> usize {
        self.levels.len()
    }

    pub fn vocab_len(&self, level: usize) -> usize {
        self.levels[level].vocab.len()
    }

    /// Checks that `annotation` has one non-empty, duplicate-free, in-range
    /// label list per level.
    pub fn validate(&self, annotation: &SampleAnnotation) -> Result<()> {
        let id = &annotation.sample_id;
        if annotation.labels_per_level.len() != self.levels.len() {
            return Err(AnnotationError::SchemaViolation(format!(
                "sample {id} has {} label lists for {} levels",
                annotation.labels_per_level.len(),
                self.levels.len()
            )));
        }
        for (g, labels) in annotation.labels_per_level.iter().enumerate() {
            if labels.is_empty() {
                return Err(AnnotationError::SchemaViolation(format!(
                    "sample {id} has no labels at level {g}"
                )));
            }
            let vocab = self.vocab_len(g);
            let mut seen = HashSet::new();
            for &label in labels {
                if label >= vocab {
                    return Err(AnnotationError::SchemaViolation(format!(
                        "sample {id} label {label} out of range at level {g} (vocabulary {vocab})"
                    )));
                }
                if !seen.insert(label) {
                    return Err(AnnotationError::SchemaViolation(format!(
                        "sample {id} repeats label {label} at level {g}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleAnnotation {
    pub sample_id: String,
    /// For each level, indices into that level's vocabulary. The first entry is
    /// the sample's designated label at that level.
    pub labels_per_level: Vec<Vec<usize>>,
}

/// How the per-sample alignment weights are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsMode {
    #[default]
    Uniform,
    Cooccurrence,
}

impl fmt::Display for WeightsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightsMode::Uniform => "uniform",
            WeightsMode::Cooccurrence => "cooccurrence",
        })
    }
}

impl FromStr for WeightsMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(WeightsMode::Uniform),
            "cooccurrence" => Ok(WeightsMode::Cooccurrence),
            other => Err(format!("unknown weights mode {other:?}")),
        }
    }
}

/// Per-(sample, assigned label) co-occurrence counts at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceTable {
    pub level: usize,
    pub sample_ids: Vec<String>,
    /// `counts[i][k]` belongs to the k-th label assigned to sample i.
    pub counts: Vec<Vec<f64>>,
}

/// Per-sample weight vectors, each summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentWeights {
    rows: Vec<Vec<f64>>,
}

impl AlignmentWeights {
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.rows
    }

    /// `1 / M_i` for every assigned label.
    pub fn uniform(annotations: &[SampleAnnotation], level: usize) -> Self {
        let rows = annotations
            .iter()
            .map(|a| {
                let m = a.labels_per_level[level].len();
                vec![1.0 / m as f64; m]
            })
            .collect();
        Self { rows }
    }
}

/// Normalizes each sample's counts to sum to one.
pub fn alignment_weights(table: &CooccurrenceTable) -> Result<AlignmentWeights> {
    let mut rows = Vec::with_capacity(table.counts.len());
    for (i, counts) in table.counts.iter().enumerate() {
        let id = || {
            table
                .sample_ids
                .get(i)
                .cloned()
                .unwrap_or_else(|| i.to_string())
        };
        if let Some(&value) = counts.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(AnnotationError::InvalidCount {
                sample: id(),
                value,
            });
        }
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) {
            return Err(AnnotationError::AllZeroCounts(id()));
        }
        rows.push(counts.iter().map(|c| c / total).collect());
    }
    Ok(AlignmentWeights { rows })
}

/// Co-occurrence counts over a corpus of annotations.
///
/// The count for (sample i, label k) is the number of corpus samples whose
/// label set at `level` contains k and shares at least one label with sample
/// i. Because k is itself one of sample i's labels the sharing condition always
/// holds, so this is the corpus frequency of k, and it is at least one.
pub fn corpus_cooccurrence(manifest: &Manifest, level: usize) -> Result<CooccurrenceTable> {
    annotation_cooccurrence(&manifest.samples, level, manifest.schema.granularity())
}

pub(crate) fn annotation_cooccurrence(
    annotations: &[SampleAnnotation],
    level: usize,
    levels: usize,
) -> Result<CooccurrenceTable> {
    if level >= levels {
        return Err(AnnotationError::LevelOutOfRange { level, levels });
    }
    let vocab = annotations
        .iter()
        .flat_map(|a| a.labels_per_level[level].iter())
        .max()
        .map_or(0, |m| m + 1);
    let mut frequency = vec![0usize; vocab];
    for a in annotations {
        for &k in &a.labels_per_level[level] {
            frequency[k] += 1;
        }
    }
    let counts = annotations
        .iter()
        .map(|a| {
            a.labels_per_level[level]
                .iter()
                .map(|&k| frequency[k] as f64)
                .collect()
        })
        .collect();
    Ok(CooccurrenceTable {
        level,
        sample_ids: annotations.iter().map(|a| a.sample_id.clone()).collect(),
        counts,
    })
}

/// Weights for every sample at `level` under `mode`.
pub fn weights_for(
    annotations: &[SampleAnnotation],
    level: usize,
    levels: usize,
    mode: WeightsMode,
) -> Result<AlignmentWeights> {
    match mode {
        WeightsMode::Uniform => Ok(AlignmentWeights::uniform(annotations, level)),
        WeightsMode::Cooccurrence => {
            alignment_weights(&annotation_cooccurrence(annotations, level, levels)?)
        }
    }
}

/// Removes each label at `level` with probability `fraction`, keeping at
/// least one label per sample (a random survivor when all would be dropped).
pub fn drop_labels(
    annotations: &[SampleAnnotation],
    level: usize,
    fraction: f64,
    seed: u64,
) -> Vec<SampleAnnotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    annotations
        .iter()
        .map(|a| {
            let mut out = a.clone();
            let labels = &a.labels_per_level[level];
            let mut kept: Vec<usize> = labels
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() >= fraction)
                .collect();
            if kept.is_empty() {
                kept.push(*labels.choose(&mut rng).expect("non-empty label list"));
            }
            out.labels_per_level[level] = kept;
            out
        })
        .collect()
}
