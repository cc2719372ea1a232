//! Analytical gradients through cosine similarity and a central-difference
//! checker for them.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{self, AlignmentBatch, LossConfig, LossError, LossKind, LossResult};
use crate::numerics::{sigmoid, Matrix, NumericsError};

#[derive(Debug, Error)]
pub enum GradientError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("finite-difference step must lie in (1e-9, 1e-3), got {0}")]
    InvalidStep(f64),
    #[error("at least one probe is required")]
    NoProbes,
    #[error("loss is non-finite after perturbing {coordinate}")]
    NonFiniteLoss { coordinate: Coordinate },
}

pub type Result<T, E = GradientError> = std::result::Result<T, E>;

/// `σ(x_ij) − y_ij`, the point-wise loss gradient before the `1/N` factor.
pub fn pointwise_logit_residual(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.rows() != y.rows() || x.cols() != y.cols() {
        return Err(NumericsError::DimensionMismatch {
            expected: x.rows() * x.cols(),
            found: y.rows() * y.cols(),
        }
        .into());
    }
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&xi, &yi)| sigmoid(xi) - yi)
        .collect();
    Ok(Matrix::new(x.rows(), x.cols(), data)?)
}

/// Gradient of the point-wise loss with respect to its logits: `(σ(x) − y) / N`.
pub fn pointwise_grad_logits(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    let mut g = pointwise_logit_residual(x, y)?;
    let n = x.rows() as f64;
    g.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(g)
}

/// Loss value and its gradient with respect to each level's similarity matrix.
pub fn similarity_grads(
    batch: &AlignmentBatch,
    cfg: &LossConfig,
    kind: LossKind,
) -> Result<(f64, Vec<Matrix>)> {
    let e = losses::evaluate(batch, cfg, kind, true)?;
    Ok((e.value, e.sim_grads.expect("gradient requested")))
}

/// Value plus gradients with respect to the image rows and every level's
/// text rows.
///
/// Uses `∂cos(a, b)/∂a = (b̂ − cos(a, b)·â) / ‖a‖`, so the embeddings need not
/// be unit length.
pub fn loss_grad(batch: &AlignmentBatch, cfg: &LossConfig, kind: LossKind) -> Result<LossResult> {
    let e = losses::evaluate(batch, cfg, kind, true)?;
    let sim_grads = e.sim_grads.expect("gradient requested");
    let cos = &e.cosines;
    let (n, d) = (batch.len(), batch.images().cols());

    let mut grad_images = Matrix::zeros(n, d);
    let mut grad_texts = Vec::with_capacity(sim_grads.len());
    let mut image_radial = vec![0.0; n];
    for (g, gs) in sim_grads.iter().enumerate() {
        let texts = &cos.texts[g];
        let sims = &cos.sims[g];
        let l = gs.cols();
        let mut gt = Matrix::zeros(l, d);
        let mut text_radial = vec![0.0; l];
        for i in 0..n {
            let vi = cos.images.unit.row(i);
            for j in 0..l {
                let gij = gs.get(i, j);
                if gij == 0.0 {
                    continue;
                }
                image_radial[i] += gij * sims.get(i, j);
                text_radial[j] += gij * sims.get(i, j);
                let tj = texts.unit.row(j);
                grad_images
                    .row_mut(i)
                    .iter_mut()
                    .zip(tj)
                    .for_each(|(o, t)| *o += gij * t);
                gt.row_mut(j)
                    .iter_mut()
                    .zip(vi)
                    .for_each(|(o, v)| *o += gij * v);
            }
        }
        for j in 0..l {
            let tj = texts.unit.row(j);
            let (r, inv) = (text_radial[j], 1.0 / texts.norms[j]);
            gt.row_mut(j)
                .iter_mut()
                .zip(tj)
                .for_each(|(o, t)| *o = (*o - r * t) * inv);
        }
        grad_texts.push(gt);
    }
    for i in 0..n {
        let vi = cos.images.unit.row(i);
        let (r, inv) = (image_radial[i], 1.0 / cos.images.norms[i]);
        grad_images
            .row_mut(i)
            .iter_mut()
            .zip(vi)
            .for_each(|(o, v)| *o = (*o - r * v) * inv);
    }
    Ok(LossResult {
        value: e.value,
        grad_images: Some(grad_images),
        grad_texts: Some(grad_texts),
    })
}

/// One embedding entry: `images[row][col]` or `texts[level][row][col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coordinate {
    /// `None` for the image matrix, otherwise the text level.
    pub level: Option<usize>,
    pub row: usize,
    pub col: usize,
}

impl std::fmt::Display for Coordinate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.level {
            None => write!(f, "images[{}][{}]", self.row, self.col),
            Some(g) => write!(f, "texts[{g}][{}][{}]", self.row, self.col),
        }
    }
}

impl Coordinate {
    fn read(&self, batch: &AlignmentBatch) -> f64 {
        match self.level {
            None => batch.images().get(self.row, self.col),
            Some(g) => batch.levels()[g].texts().get(self.row, self.col),
        }
    }

    fn write(&self, batch: &mut AlignmentBatch, value: f64) {
        match self.level {
            None => batch.images_mut().set(self.row, self.col, value),
            Some(g) => batch
                .level_mut(g)
                .texts_mut()
                .set(self.row, self.col, value),
        }
    }

    fn of(&self, result: &LossResult) -> f64 {
        match self.level {
            None => result
                .grad_images
                .as_ref()
                .expect("gradient")
                .get(self.row, self.col),
            Some(g) => result.grad_texts.as_ref().expect("gradient")[g].get(self.row, self.col),
        }
    }
}

fn all_coordinates(batch: &AlignmentBatch) -> Vec<Coordinate> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<Coordinate>, level, m: &Matrix| {
        for row in 0..m.rows() {
            for col in 0..m.cols() {
                out.push(Coordinate { level, row, col });
            }
        }
    };
    push(&mut out, None, batch.images());
    for (g, l) in batch.levels().iter().enumerate() {
        push(&mut out, Some(g), l.texts());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdOptions {
    pub step: f64,
    pub probes: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            probes: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub coordinate: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub value: f64,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub worst_coordinate: Coordinate,
    pub step: f64,
    pub probes: Vec<ProbeResult>,
}

/// Compares [`loss_grad`] against central differences on `probes` random
/// entries of the image and text matrices.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check(
    batch: &AlignmentBatch,
    cfg: &LossConfig,
    kind: LossKind,
    opts: &FdOptions,
) -> Result<GradCheckReport> {
    if !(opts.step > 1e-9 && opts.step < 1e-3) {
        return Err(GradientError::InvalidStep(opts.step));
    }
    if opts.probes == 0 {
        return Err(GradientError::NoProbes);
    }
    let analytic = loss_grad(batch, cfg, kind)?;
    let coords = all_coordinates(batch);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picked = index::sample(&mut rng, coords.len(), opts.probes.min(coords.len()));

    let mut work = batch.clone();
    let eval = |b: &AlignmentBatch, c: &Coordinate| match losses::loss_value(b, cfg, kind) {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) | Err(LossError::NonFiniteLoss(_)) => {
            Err(GradientError::NonFiniteLoss { coordinate: *c })
        }
        Err(e) => Err(e.into()),
    };

    let mut probes = Vec::with_capacity(picked.len());
    let (mut max_abs, mut max_rel, mut worst) = (0.0f64, 0.0f64, coords[picked.index(0)]);
    for idx in picked.iter() {
        let c = coords[idx];
        let x = c.read(batch);
        let (xp, xm) = (x + opts.step, x - opts.step);
        c.write(&mut work, xp);
        let fp = eval(&work, &c)?;
        c.write(&mut work, xm);
        let fm = eval(&work, &c)?;
        c.write(&mut work, x);

        let numeric = (fp - fm) / (xp - xm);
        let a = c.of(&analytic);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
        max_abs = max_abs.max(abs);
        if rel > max_rel || probes.is_empty() {
            max_rel = max_rel.max(rel);
            worst = c;
        }
        probes.push(ProbeResult {
            coordinate: c,
            analytic: a,
            numeric,
        });
    }
    Ok(GradCheckReport {
        loss: kind,
        value: analytic.value,
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        worst_coordinate: worst,
        step: opts.step,
        probes,
    })
}
