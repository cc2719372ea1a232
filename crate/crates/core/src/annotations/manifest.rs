//! JSON manifest ingestion and the on-disk dataset layout.
//!
//! ```json
//! { "schema": {"levels": [{"name": "coarse", "vocab": ["a", "b"]}]},
//!   "samples": [{"id": "s0", "labels": [[0]], "embedding": "emb/s0.mgem"}],
//!   "texts": [{"level": 0, "label": 0, "embedding": "emb/t0.mgem"}] }
//! ```
//!
//! Embedding paths are relative to the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotationError, GranularitySchema, LevelDescriptor, Result, SampleAnnotation};
use crate::numerics::{mgem, Matrix, NumericsError};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    schema: SchemaFile,
    samples: Vec<SampleFile>,
    #[serde(default)]
    texts: Vec<TextEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    levels: Vec<LevelDescriptor>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFile {
    id: String,
    labels: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<String>,
}

/// Embedding file for one (level, label) text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEntry {
    pub level: usize,
    pub label: usize,
    pub embedding: String,
}

/// A validated annotation corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema: GranularitySchema,
    pub samples: Vec<SampleAnnotation>,
    /// Optional embedding path per sample, aligned with `samples`.
    pub sample_embeddings: Vec<Option<String>>,
    pub texts: Vec<TextEntry>,
    /// Directory relative embedding paths resolve against.
    pub base_dir: PathBuf,
}

/// Image embeddings (one row per sample) and text embeddings (one matrix per
/// level, one row per vocabulary label).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrices {
    pub images: Matrix,
    pub texts: Vec<Matrix>,
}

impl Manifest {
    /// Validates everything except the presence of embedding files.
    pub fn new(
        schema: GranularitySchema,
        samples: Vec<SampleAnnotation>,
        sample_embeddings: Vec<Option<String>>,
        texts: Vec<TextEntry>,
    ) -> Result<Self> {
        if sample_embeddings.len() != samples.len() {
            return Err(AnnotationError::SchemaViolation(format!(
                "{} embedding references for {} samples",
                sample_embeddings.len(),
                samples.len()
            )));
        }
        let mut ids = HashSet::new();
        for s in &samples {
            schema.validate(s)?;
            if !ids.insert(s.sample_id.as_str()) {
                return Err(AnnotationError::SchemaViolation(format!(
                    "duplicate sample id {:?}",
                    s.sample_id
                )));
            }
        }
        let mut seen = HashSet::new();
        for t in &texts {
            if t.level >= schema.granularity() {
                return Err(AnnotationError::SchemaViolation(format!(
                    "text entry level {} out of range",
                    t.level
                )));
            }
            if t.label >= schema.vocab_len(t.level) {
                return Err(AnnotationError::SchemaViolation(format!(
                    "text entry label {} out of range at level {}",
                    t.label, t.level
                )));
            }
            if !seen.insert((t.level, t.label)) {
                return Err(AnnotationError::SchemaViolation(format!(
                    "duplicate text entry for level {} label {}",
                    t.level, t.label
                )));
            }
        }
        Ok(Self {
            schema,
            samples,
            sample_embeddings,
            texts,
            base_dir: PathBuf::from("."),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    /// Every embedding path the manifest references, resolved.
    pub fn referenced_files(&self) -> impl Iterator<Item = PathBuf> + '_ {
        self.sample_embeddings
            .iter()
            .flatten()
            .chain(self.texts.iter().map(|t| &t.embedding))
            .map(|p| self.resolve(p))
    }

    pub fn to_json(&self) -> String {
        let file = ManifestFile {
            schema: SchemaFile {
                levels: self.schema.levels().to_vec(),
            },
            samples: self
                .samples
                .iter()
                .zip(&self.sample_embeddings)
                .map(|(s, e)| SampleFile {
                    id: s.sample_id.clone(),
                    labels: s.labels_per_level.clone(),
                    embedding: e.clone(),
                })
                .collect(),
            texts: self.texts.clone(),
        };
        let mut out = serde_json::to_string_pretty(&file).expect("manifest serializes");
        out.push('\n');
        out
    }

    /// Reads every referenced MGEM file. Each sample needs an embedding and
    /// every (level, label) needs a text embedding, all of one dimension.
    pub fn load_embeddings(&self) -> Result<EmbeddingMatrices> {
        let mut dim = None;
        let mut read_row = |path: PathBuf| -> Result<Vec<f64>> {
            let m = mgem::read(&path)?;
            if m.rows() != 1 {
                return Err(AnnotationError::SchemaViolation(format!(
                    "{} holds {} rows, expected 1",
                    path.display(),
                    m.rows()
                )));
            }
            match dim {
                None => dim = Some(m.cols()),
                Some(d) if d != m.cols() => {
                    return Err(AnnotationError::SchemaViolation(format!(
                        "{} has dimension {}, expected {d}",
                        path.display(),
                        m.cols()
                    )))
                }
                _ => {}
            }
            Ok(m.into_data())
        };

        let mut image_rows = Vec::with_capacity(self.samples.len());
        for (s, e) in self.samples.iter().zip(&self.sample_embeddings) {
            let rel = e.as_ref().ok_or_else(|| {
                AnnotationError::SchemaViolation(format!("sample {} has no embedding", s.sample_id))
            })?;
            image_rows.push(read_row(self.resolve(rel))?);
        }

        let by_key: BTreeMap<(usize, usize), &str> = self
            .texts
            .iter()
            .map(|t| ((t.level, t.label), t.embedding.as_str()))
            .collect();
        let mut texts = Vec::with_capacity(self.schema.granularity());
        for g in 0..self.schema.granularity() {
            let mut rows = Vec::with_capacity(self.schema.vocab_len(g));
            for k in 0..self.schema.vocab_len(g) {
                let rel = by_key.get(&(g, k)).ok_or_else(|| {
                    AnnotationError::SchemaViolation(format!(
                        "no text embedding for level {g} label {k}"
                    ))
                })?;
                rows.push(read_row(self.resolve(rel))?);
            }
            texts.push(to_matrix(&rows)?);
        }
        Ok(EmbeddingMatrices {
            images: to_matrix(&image_rows)?,
            texts,
        })
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<Matrix> {
    Matrix::from_rows(rows)
        .map_err(|e: NumericsError| AnnotationError::SchemaViolation(e.to_string()))
}

/// Parses and validates a manifest; referenced embedding files must exist.
pub fn ingest_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| AnnotationError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let schema = GranularitySchema::new(file.schema.levels)?;
    let (samples, sample_embeddings) = file
        .samples
        .into_iter()
        .map(|s| {
            (
                SampleAnnotation {
                    sample_id: s.id,
                    labels_per_level: s.labels,
                },
                s.embedding,
            )
        })
        .unzip();
    let mut manifest = Manifest::new(schema, samples, sample_embeddings, file.texts)?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    if let Some(missing) = manifest.referenced_files().find(|p| !p.is_file()) {
        return Err(AnnotationError::MissingEmbeddingFile(missing));
    }
    Ok(manifest)
}

/// Writes `manifest.json` plus one MGEM file per referenced embedding under
/// `dir`. Returns the manifest path.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    manifest: &Manifest,
    embeddings: &EmbeddingMatrices,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AnnotationError::Io { path, source }
    };
    let ensure_parent = |p: &Path| -> Result<()> {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        Ok(())
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for (i, rel) in manifest.sample_embeddings.iter().enumerate() {
        if let Some(rel) = rel {
            let path = dir.join(rel);
            ensure_parent(&path)?;
            mgem::write(&path, &embeddings.images.select_rows(&[i]))?;
        }
    }
    for t in &manifest.texts {
        let path = dir.join(&t.embedding);
        ensure_parent(&path)?;
        mgem::write(&path, &embeddings.texts[t.level].select_rows(&[t.label]))?;
    }
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_json()).map_err(io(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.json",
            r#"{"schema":{"levels":[{"name":"disease","vocab":["a"]}]},
                "samples":[{"id":"x","labels":[[0]]}]}"#,
        );
        let m = ingest_manifest(&p).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.schema.granularity(), 1);
        assert_eq!(m.base_dir, dir.path());
    }

    #[test]
    fn out_of_range_label_is_schema_violation() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.json",
            r#"{"schema":{"levels":[{"name":"l","vocab":["a","b"]}]},
                "samples":[{"id":"x","labels":[[2]]}]}"#,
        );
        assert!(matches!(
            ingest_manifest(&p),
            Err(AnnotationError::SchemaViolation(_))
        ));
    }

    #[test]
    fn absent_embedding_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.json",
            r#"{"schema":{"levels":[{"name":"l","vocab":["a"]}]},
                "samples":[{"id":"x","labels":[[0]],"embedding":"nope.mgem"}]}"#,
        );
        match ingest_manifest(&p) {
            Err(AnnotationError::MissingEmbeddingFile(path)) => {
                assert_eq!(path, dir.path().join("nope.mgem"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.json", "{\n  \"schema\": [,\n}");
        assert!(matches!(
            ingest_manifest(&p),
            Err(AnnotationError::Parse { line: 2, .. })
        ));
        let p = write(dir.path(), "m2.json", r#"{"samples":[]}"#);
        match ingest_manifest(&p) {
            Err(AnnotationError::Parse { message, .. }) => assert!(message.contains("schema")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_level_list_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.json",
            r#"{"schema":{"levels":[{"name":"l","vocab":["a"]},{"name":"f","vocab":["b"]}]},
                "samples":[{"id":"x","labels":[[0],[]]}]}"#,
        );
        assert!(matches!(
            ingest_manifest(&p),
            Err(AnnotationError::SchemaViolation(_))
        ));
    }

    #[test]
    fn save_then_ingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let schema = GranularitySchema::new(vec![LevelDescriptor {
            name: "l".into(),
            vocab: vec!["a".into(), "b".into()],
        }])
        .unwrap();
        let manifest = Manifest::new(
            schema,
            vec![SampleAnnotation {
                sample_id: "x".into(),
                labels_per_level: vec![vec![1, 0]],
            }],
            vec![Some("e/x.mgem".into())],
            vec![
                TextEntry {
                    level: 0,
                    label: 0,
                    embedding: "e/t0.mgem".into(),
                },
                TextEntry {
                    level: 0,
                    label: 1,
                    embedding: "e/t1.mgem".into(),
                },
            ],
        )
        .unwrap();
        let emb = EmbeddingMatrices {
            images: Matrix::from_rows(&[[0.5, 0.25]]).unwrap(),
            texts: vec![Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()],
        };
        let path = save_dataset(dir.path(), &manifest, &emb).unwrap();
        let loaded = ingest_manifest(&path).unwrap();
        assert_eq!(loaded.samples, manifest.samples);
        assert_eq!(loaded.load_embeddings().unwrap(), emb);
        assert_eq!(fs::read_to_string(&path).unwrap(), manifest.to_json());
    }
}
