//! Forward evaluation of the CLIP baseline and the multi-granularity objectives.

mod batch;
mod kl;
mod terms;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{AnnotationError, WeightsMode};
use crate::numerics::{stable_softmax, Accumulator, Matrix, NumericsError, ProbabilityVector};

pub(crate) use batch::Cosines;
pub use batch::{AlignmentBatch, LevelBatch};
pub use kl::{smooth_kl_divergence, smooth_kl_logits, KlGradMode, KL_CLAMP};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("level {level} out of range for {levels} levels")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error(
        "sample {sample} has several labels at level {level} and strict single-label mode is on"
    )]
    MultiLabelAmbiguity { sample: usize, level: usize },
    #[error("smooth KL needs at least two granularity levels")]
    SingleGranularity,
    #[error("distribution lengths differ: expected {expected}, found {found}")]
    LevelMismatch { expected: usize, found: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("{role} row {row} has zero or non-finite norm")]
    DegenerateEmbedding { role: String, row: usize },
    #[error("loss evaluated to a non-finite value ({0})")]
    NonFiniteLoss(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub weights_mode: WeightsMode,
    pub kl_grad_mode: KlGradMode,
    /// Temperature for the point-wise logits; `None` uses raw cosines.
    pub pointwise_tau: Option<f64>,
    /// Divide smooth-KL logits by `tau` before the softmax.
    pub kl_temperature: bool,
    /// Make `clip_loss` reject samples with more than one label.
    pub strict_single_label: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            alpha1: 0.5,
            alpha2: 1.0,
            alpha3: 1.0,
            weights_mode: WeightsMode::Uniform,
            kl_grad_mode: KlGradMode::Exact,
            pointwise_tau: None,
            kl_temperature: true,
            strict_single_label: false,
        }
    }
}

impl LossConfig {
    pub fn with_alphas(self, alpha1: f64, alpha2: f64, alpha3: f64) -> Self {
        Self {
            alpha1,
            alpha2,
            alpha3,
            ..self
        }
    }

    pub fn with_tau(self, tau: f64) -> Self {
        Self { tau, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        for (name, a) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(LossError::InvalidConfig(format!(
                    "{name} must be >= 0, got {a}"
                )));
            }
        }
        if let Some(t) = self.pointwise_tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(LossError::InvalidConfig(format!(
                    "pointwise_tau must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }

    fn pointwise_scale(&self) -> f64 {
        self.pointwise_tau.map_or(1.0, |t| 1.0 / t)
    }

    fn kl_scale(&self) -> f64 {
        if self.kl_temperature {
            1.0 / self.tau
        } else {
            1.0
        }
    }
}

/// Which objective to evaluate or differentiate.
///
/// The per-level objectives (`Clip`, `SoftClip`, `Pointwise`) are averaged
/// over all levels of the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "clip")]
    Clip,
    #[serde(rename = "sclip")]
    SoftClip,
    #[serde(rename = "pointwise")]
    Pointwise,
    #[serde(rename = "skl")]
    SmoothKl,
    #[serde(rename = "mgll")]
    Mgll,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Clip,
        LossKind::SoftClip,
        LossKind::Pointwise,
        LossKind::SmoothKl,
        LossKind::Mgll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Clip => "clip",
            Self::SoftClip => "sclip",
            Self::Pointwise => "pointwise",
            Self::SmoothKl => "skl",
            Self::Mgll => "mgll",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clip" => Ok(Self::Clip),
            "sclip" | "soft-clip" => Ok(Self::SoftClip),
            "pointwise" => Ok(Self::Pointwise),
            "skl" | "smooth-kl" => Ok(Self::SmoothKl),
            "mgll" | "combined" => Ok(Self::Mgll),
            other => Err(format!(
                "unknown loss `{other}` (expected clip, sclip, pointwise, skl or mgll)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipDirection {
    #[default]
    ImageToText,
    TextToImage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossResult {
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_images: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_texts: Option<Vec<Matrix>>,
}

impl LossResult {
    fn value_only(value: f64) -> Self {
        Self {
            value,
            grad_images: None,
            grad_texts: None,
        }
    }
}

/// Loss value plus, optionally, its gradient with respect to every level's
/// similarity matrix.
pub(crate) struct SimEvaluation {
    pub value: f64,
    pub sim_grads: Option<Vec<Matrix>>,
    pub cosines: Cosines,
}

#[derive(Debug, Clone, Copy)]
enum Scope {
    AllLevels,
    Level(usize),
}

impl Scope {
    fn levels(self, batch: &AlignmentBatch) -> Result<Vec<usize>> {
        match self {
            Scope::AllLevels => Ok((0..batch.granularity()).collect()),
            Scope::Level(g) => batch.level(g).map(|_| vec![g]),
        }
    }
}

fn per_level(
    batch: &AlignmentBatch,
    cos: &Cosines,
    cfg: &LossConfig,
    kind: LossKind,
    scope: Scope,
    weight: f64,
    grads: &mut Option<Vec<Matrix>>,
) -> Result<f64> {
    let levels = scope.levels(batch)?;
    let count = levels.len() as f64;
    let share = weight / count;
    let mut total = Accumulator::default();
    for g in levels {
        let level = batch.level(g)?;
        let sims = &cos.sims[g];
        let sink = grads.as_mut().map(|gs| (&mut gs[g], share));
        total.add(match kind {
            LossKind::Clip => terms::clip(
                sims,
                level,
                g,
                cfg.tau,
                ClipDirection::ImageToText,
                cfg.strict_single_label,
                sink,
            )?,
            LossKind::SoftClip => terms::soft_clip(sims, level, cfg.tau, sink),
            LossKind::Pointwise => terms::pointwise(
                sims,
                level,
                &batch.match_labels(g)?,
                cfg.pointwise_scale(),
                sink,
            ),
            LossKind::SmoothKl | LossKind::Mgll => unreachable!("not a per-level objective"),
        });
    }
    Ok(weight * (total.value() / count))
}

/// Samples grouped by their tuple of designated texts across levels.
struct DesignatedGroups {
    tuples: Vec<Vec<usize>>,
    counts: Vec<f64>,
}

impl DesignatedGroups {
    fn new(batch: &AlignmentBatch) -> Self {
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut tuples = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for i in 0..batch.len() {
            let key: Vec<usize> = batch.levels().iter().map(|l| l.designated(i)).collect();
            match index.get(&key) {
                Some(&u) => counts[u] += 1.0,
                None => {
                    index.insert(key.clone(), tuples.len());
                    tuples.push(key);
                    counts.push(1.0);
                }
            }
        }
        Self { tuples, counts }
    }
}

fn smooth_kl(
    batch: &AlignmentBatch,
    cos: &Cosines,
    cfg: &LossConfig,
    weight: f64,
    grads: &mut Option<Vec<Matrix>>,
) -> Result<f64> {
    if batch.granularity() < 2 {
        return Err(LossError::SingleGranularity);
    }
    let groups = DesignatedGroups::new(batch);
    let scale = cfg.kl_scale();
    let n = batch.len() as f64;
    let mut total = Accumulator::default();
    for i in 0..batch.len() {
        let logits: Vec<Vec<f64>> = (0..batch.granularity())
            .map(|g| {
                groups
                    .tuples
                    .iter()
                    .map(|t| cos.sims[g].get(i, t[g]) * scale)
                    .collect()
            })
            .collect();
        let (value, dz) =
            kl::smooth_kl_core(&logits, &groups.counts, cfg.kl_grad_mode, grads.is_some());
        total.add(value);
        if let (Some(gs), Some(dz)) = (grads.as_mut(), dz) {
            for (g, dz_g) in dz.iter().enumerate() {
                let cols = gs[g].cols();
                let row = &mut gs[g].data_mut()[i * cols..(i + 1) * cols];
                for (t, d) in groups.tuples.iter().zip(dz_g) {
                    row[t[g]] += weight * scale * d / n;
                }
            }
        }
    }
    Ok(weight * total.value() / n)
}

fn mgll(
    batch: &AlignmentBatch,
    cos: &Cosines,
    cfg: &LossConfig,
    grads: &mut Option<Vec<Matrix>>,
) -> Result<f64> {
    let mut value = 0.0;
    if cfg.alpha1 > 0.0 {
        value += per_level(
            batch,
            cos,
            cfg,
            LossKind::SoftClip,
            Scope::AllLevels,
            cfg.alpha1,
            grads,
        )?;
    }
    if cfg.alpha2 > 0.0 {
        value += per_level(
            batch,
            cos,
            cfg,
            LossKind::Pointwise,
            Scope::AllLevels,
            cfg.alpha2,
            grads,
        )?;
    }
    if cfg.alpha3 > 0.0 && batch.granularity() >= 2 {
        value += smooth_kl(batch, cos, cfg, cfg.alpha3, grads)?;
    }
    Ok(value)
}

fn evaluate_scoped(
    batch: &AlignmentBatch,
    cfg: &LossConfig,
    kind: LossKind,
    scope: Scope,
    want_grad: bool,
) -> Result<SimEvaluation> {
    cfg.validate()?;
    let cosines = Cosines::new(batch)?;
    let mut grads = want_grad.then(|| {
        cosines
            .sims
            .iter()
            .map(|s| Matrix::zeros(s.rows(), s.cols()))
            .collect::<Vec<_>>()
    });
    let value = match kind {
        LossKind::Clip | LossKind::SoftClip | LossKind::Pointwise => {
            per_level(batch, &cosines, cfg, kind, scope, 1.0, &mut grads)?
        }
        LossKind::SmoothKl => smooth_kl(batch, &cosines, cfg, 1.0, &mut grads)?,
        LossKind::Mgll => mgll(batch, &cosines, cfg, &mut grads)?,
    };
    if !value.is_finite() {
        return Err(LossError::NonFiniteLoss(value));
    }
    Ok(SimEvaluation {
        value,
        sim_grads: grads,
        cosines,
    })
}

pub(crate) fn evaluate(
    batch: &AlignmentBatch,
    cfg: &LossConfig,
    kind: LossKind,
    want_grad: bool,
) -> Result<SimEvaluation> {
    evaluate_scoped(batch, cfg, kind, Scope::AllLevels, want_grad)
}

/// Scalar value of `kind` on `batch`.
pub fn loss_value(batch: &AlignmentBatch, cfg: &LossConfig, kind: LossKind) -> Result<f64> {
    Ok(evaluate(batch, cfg, kind, false)?.value)
}

/// CLIP baseline at one level, image-to-text direction, on designated texts.
pub fn clip_loss(batch: &AlignmentBatch, level: usize, cfg: &LossConfig) -> Result<LossResult> {
    clip_loss_directional(batch, level, cfg, ClipDirection::ImageToText)
}

/// CLIP baseline at one level in the given direction.
pub fn clip_loss_directional(
    batch: &AlignmentBatch,
    level: usize,
    cfg: &LossConfig,
    direction: ClipDirection,
) -> Result<LossResult> {
    cfg.validate()?;
    let lvl = batch.level(level)?;
    let cos = Cosines::new(batch)?;
    let value = terms::clip(
        &cos.sims[level],
        lvl,
        level,
        cfg.tau,
        direction,
        cfg.strict_single_label,
        None,
    )?;
    Ok(LossResult::value_only(value))
}

pub fn soft_clip_loss(
    batch: &AlignmentBatch,
    level: usize,
    cfg: &LossConfig,
) -> Result<LossResult> {
    let e = evaluate_scoped(batch, cfg, LossKind::SoftClip, Scope::Level(level), false)?;
    Ok(LossResult::value_only(e.value))
}

pub fn pointwise_loss(
    batch: &AlignmentBatch,
    level: usize,
    cfg: &LossConfig,
) -> Result<LossResult> {
    let e = evaluate_scoped(batch, cfg, LossKind::Pointwise, Scope::Level(level), false)?;
    Ok(LossResult::value_only(e.value))
}

pub fn smooth_kl_loss(batch: &AlignmentBatch, cfg: &LossConfig) -> Result<LossResult> {
    Ok(LossResult::value_only(loss_value(
        batch,
        cfg,
        LossKind::SmoothKl,
    )?))
}

pub fn mgll_loss(batch: &AlignmentBatch, cfg: &LossConfig) -> Result<LossResult> {
    Ok(LossResult::value_only(loss_value(
        batch,
        cfg,
        LossKind::Mgll,
    )?))
}

/// Per-level distributions of `sample` over the batch: entry n of level g is
/// the softmax weight of the similarity to sample n's designated text.
pub fn granularity_distributions(
    batch: &AlignmentBatch,
    sample: usize,
    cfg: &LossConfig,
) -> Result<Vec<ProbabilityVector>> {
    cfg.validate()?;
    if sample >= batch.len() {
        return Err(LossError::InvalidBatch(format!(
            "sample {sample} out of range for {} samples",
            batch.len()
        )));
    }
    let cos = Cosines::new(batch)?;
    let scale = cfg.kl_scale();
    batch
        .levels()
        .iter()
        .enumerate()
        .map(|(g, level)| {
            let logits: Vec<f64> = (0..batch.len())
                .map(|n| cos.sims[g].get(sample, level.designated(n)) * scale)
                .collect();
            Ok(stable_softmax(&logits)?)
        })
        .collect()
}

#[cfg(test)]
mod tests;
