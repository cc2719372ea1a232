//! Projected gradient descent on embeddings, fixed-point probes, and the
//! synthetic ablation protocol.

mod ablation;

pub use ablation::{
    ablation_run, ladder, AblationConfig, AblationRow, AblationTable, AblationVariant, Dataset,
    Ladder,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::AnnotationError;
use crate::gradients::{loss_grad, GradientError};
use crate::losses::{
    smooth_kl_logits, AlignmentBatch, KlGradMode, LossConfig, LossError, LossKind,
};
use crate::metrics::MetricsError;
use crate::numerics::{dot, norm, row_normalize, stable_softmax, Matrix, NumericsError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid descent config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("nothing to train: both image and text updates are disabled")]
    NothingToTrain,
    #[error("loss became non-finite at iteration {iteration}")]
    DivergenceDetected { iteration: usize },
    #[error("weighted text centroid is the zero vector")]
    DegenerateCentroid,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Gradient(GradientError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

impl From<GradientError> for TrainerError {
    fn from(e: GradientError) -> Self {
        match e {
            GradientError::Loss(l) => TrainerError::Loss(l),
            other => TrainerError::Gradient(other),
        }
    }
}

pub type Result<T, E = TrainerError> = std::result::Result<T, E>;

/// Number of iterations the stopping rule looks back over.
pub const WINDOW: usize = 10;
/// Slack allowed before a loss rise counts as an increase.
pub const INCREASE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub renormalize: bool,
    pub seed: u64,
    /// Stop as soon as the loss rises after the first window.
    pub stop_on_increase: bool,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            max_iters: 1000,
            tolerance: 1e-10,
            renormalize: true,
            seed: 0,
            stop_on_increase: false,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(TrainerError::InvalidConfig(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.max_iters < 1 {
            return Err(TrainerError::InvalidConfig(
                "max_iters must be at least 1".into(),
            ));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(TrainerError::InvalidConfig(format!(
                "tolerance must be >= 0, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub losses: Vec<f64>,
    pub images: Matrix,
    pub texts: Vec<Matrix>,
    pub converged: bool,
    pub iterations: usize,
    /// First iteration past the initial window whose loss rose by more than
    /// [`INCREASE_SLACK`].
    pub first_increase: Option<usize>,
}

fn step_rows(target: &mut Matrix, grad: &Matrix, step: f64, renormalize: bool) -> Result<()> {
    target
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .for_each(|(t, g)| *t -= step * g);
    if renormalize {
        *target = row_normalize(target)?;
    }
    Ok(())
}

/// Projected gradient descent on the batch embeddings.
///
/// Each iteration records the current loss, then moves the trainable rows
/// against the gradient and (by default) renormalizes them. Stops once the
/// loss fell by less than `tolerance` over the last [`WINDOW`] iterations.
pub fn descend(
    batch: &AlignmentBatch,
    cfg: &LossConfig,
    dcfg: &DescentConfig,
    kind: LossKind,
    train_images: bool,
    train_texts: bool,
) -> Result<Trajectory> {
    dcfg.validate()?;
    if !train_images && !train_texts {
        return Err(TrainerError::NothingToTrain);
    }
    let mut b = batch.clone();
    let mut losses_seen = Vec::new();
    let mut converged = false;
    let mut first_increase = None;
    for t in 0..dcfg.max_iters {
        let r = match loss_grad(&b, cfg, kind) {
            Ok(r) => r,
            Err(GradientError::Loss(LossError::NonFiniteLoss(_))) => {
                return Err(TrainerError::DivergenceDetected { iteration: t })
            }
            Err(e) => return Err(e.into()),
        };
        losses_seen.push(r.value);
        if t >= WINDOW && r.value > losses_seen[t - 1] + INCREASE_SLACK {
            first_increase.get_or_insert(t);
            if dcfg.stop_on_increase {
                break;
            }
        }
        if t >= WINDOW && losses_seen[t - WINDOW] - r.value < dcfg.tolerance {
            converged = true;
            break;
        }
        if t + 1 == dcfg.max_iters {
            break;
        }
        if train_images {
            let mut images = b.images().clone();
            step_rows(
                &mut images,
                r.grad_images.as_ref().expect("gradient"),
                dcfg.step_size,
                dcfg.renormalize,
            )?;
            b.set_images(images)?;
        }
        if train_texts {
            for (g, gt) in r.grad_texts.as_ref().expect("gradient").iter().enumerate() {
                step_rows(
                    b.level_mut(g).texts_mut(),
                    gt,
                    dcfg.step_size,
                    dcfg.renormalize,
                )?;
            }
        }
        if !b.images().is_finite() || b.levels().iter().any(|l| !l.texts().is_finite()) {
            return Err(TrainerError::DivergenceDetected { iteration: t + 1 });
        }
    }
    Ok(Trajectory {
        iterations: losses_seen.len(),
        losses: losses_seen,
        images: b.images().clone(),
        texts: b.levels().iter().map(|l| l.texts().clone()).collect(),
        converged,
        first_increase,
    })
}

fn weighted_centroid(texts: &Matrix, weights: &[f64]) -> Result<Vec<f64>> {
    if texts.rows() != weights.len() || texts.rows() == 0 {
        return Err(TrainerError::InvalidInput(format!(
            "{} texts but {} weights",
            texts.rows(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(TrainerError::InvalidInput(
            "weights must be a probability vector".into(),
        ));
    }
    let unit = row_normalize(texts)?;
    let mut c = vec![0.0; texts.cols()];
    for (row, w) in unit.iter_rows().zip(weights) {
        c.iter_mut().zip(row).for_each(|(ci, t)| *ci += w * t);
    }
    if norm(&c) <= 1e-12 {
        return Err(TrainerError::DegenerateCentroid);
    }
    Ok(c)
}

/// Distance from unit vector `v` to the normalized weighted centroid of the
/// normalized texts, i.e. to the maximizer of `Σ w_k cos(v, T_k)` on the sphere.
pub fn alignment_objective_residual(v: &[f64], texts: &Matrix, weights: &[f64]) -> Result<f64> {
    if v.len() != texts.cols() {
        return Err(NumericsError::DimensionMismatch {
            expected: texts.cols(),
            found: v.len(),
        }
        .into());
    }
    if (norm(v) - 1.0).abs() > 1e-9 {
        return Err(TrainerError::InvalidInput(format!(
            "v has norm {}",
            norm(v)
        )));
    }
    let c = weighted_centroid(texts, weights)?;
    let n = norm(&c);
    Ok(v.iter()
        .zip(&c)
        .map(|(vi, ci)| (vi - ci / n).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Projected gradient ascent of `Σ w_k cos(v, T_k)` over unit vectors from a
/// seeded random start. Stops when a step moves `v` by less than `tolerance`.
pub fn maximize_alignment(
    texts: &Matrix,
    weights: &[f64],
    dcfg: &DescentConfig,
) -> Result<(Vec<f64>, f64)> {
    dcfg.validate()?;
    let c = weighted_centroid(texts, weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(dcfg.seed);
    let mut v: Vec<f64> = (0..texts.cols())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);

    for _ in 0..dcfg.max_iters {
        let along = dot(&c, &v);
        let mut next: Vec<f64> = v
            .iter()
            .zip(&c)
            .map(|(vi, ci)| vi + dcfg.step_size * (ci - along * vi))
            .collect();
        let n = norm(&next);
        next.iter_mut().for_each(|x| *x /= n);
        let moved = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        v = next;
        if moved < dcfg.tolerance {
            break;
        }
    }
    let residual = alignment_objective_residual(&v, texts, weights)?;
    Ok((v, residual))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlProbe {
    pub initial_value: f64,
    pub final_value: f64,
    /// `max_g TV(P_g, M)` at the end.
    pub max_tv: f64,
    pub iterations: usize,
}

fn max_tv(logits: &[Vec<f64>]) -> Result<f64> {
    let dists = logits
        .iter()
        .map(|z| stable_softmax(z))
        .collect::<Result<Vec<_>, _>>()?;
    let m = dists.len() as f64;
    let len = dists[0].len();
    let mean: Vec<f64> = (0..len)
        .map(|j| dists.iter().map(|p| p.probs()[j]).sum::<f64>() / m)
        .collect();
    Ok(dists
        .iter()
        .map(|p| {
            0.5 * p
                .probs()
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max))
}

/// Descends the smooth-KL term over free per-level logits.
///
/// Plain gradient steps with a simple adaptive rate: a step that raises the
/// loss is undone and the rate halved; an accepted step grows it by half.
/// Stops on `max_iters` or when the loss is below `tolerance`.
pub fn kl_consistency_from_logits(
    logits: Vec<Vec<f64>>,
    mode: KlGradMode,
    dcfg: &DescentConfig,
) -> Result<KlProbe> {
    dcfg.validate()?;
    let mut z = logits;
    let (mut value, mut grad) = smooth_kl_logits(&z, mode)?;
    let initial_value = value;
    let mut rate = dcfg.step_size;
    let mut iterations = 0;
    while iterations < dcfg.max_iters && value > dcfg.tolerance {
        iterations += 1;
        let trial: Vec<Vec<f64>> = z
            .iter()
            .zip(&grad)
            .map(|(zg, gg)| zg.iter().zip(gg).map(|(a, b)| a - rate * b).collect())
            .collect();
        let (v, g) = smooth_kl_logits(&trial, mode)?;
        if !v.is_finite() {
            return Err(TrainerError::DivergenceDetected {
                iteration: iterations,
            });
        }
        if v <= value {
            z = trial;
            value = v;
            grad = g;
            rate = (rate * 1.5).min(1e6);
        } else {
            rate *= 0.5;
        }
    }
    Ok(KlProbe {
        initial_value,
        final_value: value,
        max_tv: max_tv(&z)?,
        iterations,
    })
}

/// Runs [`kl_consistency_from_logits`] from every sample's per-level batch
/// logits and returns the largest final `max_g TV(P_g, M)`.
pub fn kl_consistency_probe(
    batch: &AlignmentBatch,
    cfg: &LossConfig,
    dcfg: &DescentConfig,
) -> Result<f64> {
    if batch.granularity() < 2 {
        return Err(LossError::SingleGranularity.into());
    }
    if cfg.kl_grad_mode != KlGradMode::Exact {
        return Err(TrainerError::InvalidInput(
            "the consistency probe runs on exact gradients".into(),
        ));
    }
    let scale = if cfg.kl_temperature {
        1.0 / cfg.tau
    } else {
        1.0
    };
    let images = row_normalize(batch.images())?;
    let mut worst = 0.0f64;
    for i in 0..batch.len() {
        let logits = batch
            .levels()
            .iter()
            .map(|l| {
                let texts = row_normalize(l.texts())?;
                Ok((0..batch.len())
                    .map(|n| dot(images.row(i), texts.row(l.designated(n))) * scale)
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let probe = kl_consistency_from_logits(logits, cfg.kl_grad_mode, dcfg)?;
        worst = worst.max(probe.max_tv);
    }
    Ok(worst)
}
