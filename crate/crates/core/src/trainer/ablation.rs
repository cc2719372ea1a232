//! Held-out retrieval comparison of loss variants on a labelled corpus.
//!
//! Image embeddings are produced by a shared linear map `V = X Wᵀ` applied to
//! the corpus embeddings `X`; only `W` is trained, text anchors stay fixed.
//! Held-out samples are scored by cosine against every label anchor of every
//! level, and the metrics module turns those scores into macro AUC and mAP.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TrainerError};
use crate::annotations::{drop_labels, EmbeddingMatrices, Manifest, SampleAnnotation, FINE_LEVEL};
use crate::gradients::loss_grad;
use crate::losses::{AlignmentBatch, LossConfig, LossKind};
use crate::metrics::{evaluate, ScoredLabels};
use crate::numerics::{row_normalize, similarity_matrix, Matrix};

/// Annotations and their embeddings, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub annotations: Vec<SampleAnnotation>,
    pub embeddings: EmbeddingMatrices,
}

impl Dataset {
    pub fn new(manifest: &Manifest, embeddings: EmbeddingMatrices) -> Result<Self> {
        if embeddings.images.rows() != manifest.len() {
            return Err(TrainerError::InvalidInput(format!(
                "{} image rows for {} samples",
                embeddings.images.rows(),
                manifest.len()
            )));
        }
        Ok(Self {
            annotations: manifest.samples.clone(),
            embeddings,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub kind: LossKind,
    pub loss: LossConfig,
}

impl AblationVariant {
    pub fn new(name: impl Into<String>, kind: LossKind, loss: LossConfig) -> Self {
        Self {
            name: name.into(),
            kind,
            loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Ladder {
    /// CLIP, point-wise, soft CLIP, soft CLIP + point-wise, all three terms.
    #[default]
    Paper,
    /// Full objective under the four weight-factor settings.
    Weights,
    /// Full objective at τ ∈ {0.05, 0.07, 0.20, 0.50}.
    Temperature,
}

impl std::fmt::Display for Ladder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Weights => "weights",
            Self::Temperature => "temperature",
        })
    }
}

impl std::str::FromStr for Ladder {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(Self::Paper),
            "weights" => Ok(Self::Weights),
            "temperature" | "tau" => Ok(Self::Temperature),
            other => Err(format!(
                "unknown ladder `{other}` (expected paper, weights or temperature)"
            )),
        }
    }
}

/// Variant list for `which`, built on top of `base`.
pub fn ladder(which: Ladder, base: &LossConfig) -> Vec<AblationVariant> {
    let (a1, a2, a3) = (base.alpha1, base.alpha2, base.alpha3);
    let mgll = |name: &str, cfg: LossConfig| AblationVariant::new(name, LossKind::Mgll, cfg);
    match which {
        Ladder::Paper => vec![
            AblationVariant::new("clip", LossKind::Clip, *base),
            mgll("p", base.with_alphas(0.0, a2, 0.0)),
            mgll("sclip", base.with_alphas(a1, 0.0, 0.0)),
            mgll("sclip+p", base.with_alphas(a1, a2, 0.0)),
            mgll("full", base.with_alphas(a1, a2, a3)),
        ],
        Ladder::Weights => [
            (1.0, 1.0, 1.0),
            (0.5, 1.0, 1.0),
            (1.0, 0.5, 1.0),
            (1.0, 1.0, 0.5),
        ]
        .into_iter()
        .map(|(x, y, z)| mgll(&format!("alpha=({x},{y},{z})"), base.with_alphas(x, y, z)))
        .collect(),
        Ladder::Temperature => [0.05, 0.07, 0.20, 0.50]
            .into_iter()
            .map(|t| mgll(&format!("tau={t:.2}"), base.with_tau(t)))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub split_seed: u64,
    pub held_out_fraction: f64,
    pub step_size: f64,
    pub iterations: usize,
    /// Fraction of fine-level training labels removed before training.
    pub missing_fine_fraction: f64,
    pub threshold: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            held_out_fraction: 0.2,
            step_size: 0.05,
            iterations: 150,
            missing_fine_fraction: 0.0,
            threshold: 0.5,
        }
    }
}

impl AblationConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainerError::InvalidConfig(m));
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            return bad(format!(
                "held_out_fraction must lie in (0, 1), got {}",
                self.held_out_fraction
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!(
                "step_size must be positive, got {}",
                self.step_size
            ));
        }
        if !(0.0..1.0).contains(&self.missing_fine_fraction) {
            return bad(format!(
                "missing_fine_fraction must lie in [0, 1), got {}",
                self.missing_fine_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub kind: LossKind,
    pub loss: LossConfig,
    pub auc: f64,
    pub map: f64,
    pub acc: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config: AblationConfig,
    pub train_samples: usize,
    pub held_out_samples: usize,
    /// Held-out AUC of the untrained (identity) map.
    pub untrained_auc: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Aligned-column text rendering.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.variant.len())
            .max()
            .unwrap_or(7)
            .max(7);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>10}\n",
            "variant", "auc", "map", "acc", "final_loss"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>10.5}\n",
                r.variant, r.auc, r.map, r.acc, r.final_loss
            ));
        }
        out
    }
}

/// `X Wᵀ`.
fn apply_map(x: &Matrix, w: &Matrix) -> Matrix {
    let (n, d) = (x.rows(), w.rows());
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for (a, o) in oi.iter_mut().enumerate() {
            *o = w.row(a).iter().zip(xi).map(|(p, q)| p * q).sum();
        }
    }
    out
}

/// `Gᵀ X`, the gradient with respect to `W` given `G = ∂L/∂V`.
fn map_gradient(g: &Matrix, x: &Matrix) -> Matrix {
    let d = g.cols();
    let mut out = Matrix::zeros(d, x.cols());
    for i in 0..g.rows() {
        let (gi, xi) = (g.row(i), x.row(i));
        for (a, &ga) in gi.iter().enumerate() {
            if ga != 0.0 {
                out.row_mut(a)
                    .iter_mut()
                    .zip(xi)
                    .for_each(|(o, xb)| *o += ga * xb);
            }
        }
    }
    out
}

fn rescale_frobenius(w: &mut Matrix, target: f64) {
    let n = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        w.data_mut().iter_mut().for_each(|v| *v *= target / n);
    }
}

fn identity(d: usize) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        m.set(i, i, 1.0);
    }
    m
}

struct Split {
    train: Vec<usize>,
    test: Vec<usize>,
}

fn split(n: usize, held_out: f64, seed: u64) -> Result<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_len = ((n as f64) * held_out).round() as usize;
    if test_len == 0 || test_len == n {
        return Err(TrainerError::InvalidInput(format!(
            "{n} samples cannot be split with held-out fraction {held_out}"
        )));
    }
    let (test, train) = order.split_at(test_len);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Held-out scores against every anchor of every level, and matching truth.
fn held_out_scores(
    x_test: &Matrix,
    w: &Matrix,
    anchors: &[Matrix],
    annotations: &[SampleAnnotation],
) -> Result<ScoredLabels> {
    let v = row_normalize(&apply_map(x_test, w))?;
    let per_level = anchors
        .iter()
        .map(|a| Ok(similarity_matrix(&v, &row_normalize(a)?)?))
        .collect::<Result<Vec<_>>>()?;
    let cols: usize = anchors.iter().map(Matrix::rows).sum();
    let mut scores = Matrix::zeros(v.rows(), cols);
    let mut truth = Matrix::zeros(v.rows(), cols);
    for i in 0..v.rows() {
        let mut offset = 0;
        for (g, s) in per_level.iter().enumerate() {
            for j in 0..s.cols() {
                scores.set(i, offset + j, s.get(i, j));
            }
            for &label in &annotations[i].labels_per_level[g] {
                truth.set(i, offset + label, 1.0);
            }
            offset += s.cols();
        }
    }
    Ok(ScoredLabels::new(scores, truth)?)
}

/// Trains the shared map for one variant and returns `(W, initial, final loss)`.
fn train_map(
    x: &Matrix,
    annotations: &[SampleAnnotation],
    anchors: &[Matrix],
    variant: &AblationVariant,
    cfg: &AblationConfig,
) -> Result<(Matrix, f64, f64)> {
    let d = x.cols();
    let mut w = identity(d);
    let frobenius = (d as f64).sqrt();
    let mut batch =
        AlignmentBatch::from_annotations(annotations, x, anchors, variant.loss.weights_mode)?;
    let mut initial = None;
    let mut last = f64::NAN;
    for it in 0..=cfg.iterations {
        batch.set_images(apply_map(x, &w))?;
        let r = loss_grad(&batch, &variant.loss, variant.kind)?;
        if !r.value.is_finite() {
            return Err(TrainerError::DivergenceDetected { iteration: it });
        }
        initial.get_or_insert(r.value);
        last = r.value;
        if it == cfg.iterations {
            break;
        }
        let gw = map_gradient(r.grad_images.as_ref().expect("gradient"), x);
        w.data_mut()
            .iter_mut()
            .zip(gw.data())
            .for_each(|(p, g)| *p -= cfg.step_size * g);
        rescale_frobenius(&mut w, frobenius);
    }
    Ok((w, initial.unwrap_or(last), last))
}

/// Trains every variant on the same split and reports held-out metrics.
pub fn ablation_run(
    data: &Dataset,
    variants: &[AblationVariant],
    cfg: &AblationConfig,
) -> Result<AblationTable> {
    cfg.validate()?;
    for v in variants {
        v.loss.validate()?;
    }
    let n = data.annotations.len();
    let s = split(n, cfg.held_out_fraction, cfg.split_seed)?;
    let x = &data.embeddings.images;
    let anchors = &data.embeddings.texts;
    let x_train = x.select_rows(&s.train);
    let x_test = x.select_rows(&s.test);
    let mut train_ann: Vec<SampleAnnotation> = s
        .train
        .iter()
        .map(|&i| data.annotations[i].clone())
        .collect();
    let test_ann: Vec<SampleAnnotation> = s
        .test
        .iter()
        .map(|&i| data.annotations[i].clone())
        .collect();
    if cfg.missing_fine_fraction > 0.0 {
        if anchors.len() <= FINE_LEVEL {
            return Err(TrainerError::InvalidInput(
                "corpus has no fine level".into(),
            ));
        }
        train_ann = drop_labels(
            &train_ann,
            FINE_LEVEL,
            cfg.missing_fine_fraction,
            cfg.split_seed,
        );
    }

    let d = x.cols();
    let untrained = evaluate(
        &held_out_scores(&x_test, &identity(d), anchors, &test_ann)?,
        cfg.threshold,
    )?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let (w, initial_loss, final_loss) = train_map(&x_train, &train_ann, anchors, v, cfg)?;
        let report = evaluate(
            &held_out_scores(&x_test, &w, anchors, &test_ann)?,
            cfg.threshold,
        )?;
        log::info!("variant {} auc {:.4}", v.name, report.auc);
        rows.push(AblationRow {
            variant: v.name.clone(),
            kind: v.kind,
            loss: v.loss,
            auc: report.auc,
            map: report.map,
            acc: report.acc,
            initial_loss,
            final_loss,
        });
    }
    Ok(AblationTable {
        config: *cfg,
        train_samples: s.train.len(),
        held_out_samples: s.test.len(),
        untrained_auc: untrained.auc,
        rows,
    })
}
