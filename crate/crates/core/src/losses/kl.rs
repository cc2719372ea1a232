//! Sum of KL divergences from each level's distribution to their mean.

use serde::{Deserialize, Serialize};

use super::{LossError, Result};
use crate::numerics::{weighted_log_sum_exp, Accumulator, ProbabilityVector};

/// Probability floor applied before taking logs.
pub const KL_CLAMP: f64 = 1e-12;

/// How the smooth-KL gradient treats the mean distribution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlGradMode {
    /// Differentiates through the mean's dependence on every level.
    #[default]
    Exact,
    /// Holds the mean fixed: `∂/∂P = log(P/M) + 1`.
    #[serde(alias = "approximate")]
    Approx,
}

impl std::fmt::Display for KlGradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Approx => "approx",
        })
    }
}

impl std::str::FromStr for KlGradMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(Self::Exact),
            "approx" | "approximate" => Ok(Self::Approx),
            other => Err(format!(
                "unknown KL gradient mode `{other}` (expected exact or approx)"
            )),
        }
    }
}

fn clamped_ln(p: f64) -> f64 {
    p.max(KL_CLAMP).ln()
}

fn entry(p: f64, m: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (clamped_ln(p) - clamped_ln(m))
    }
}

/// `Σ_g D_KL(P_g ‖ M)` for explicit distributions of equal length.
pub fn smooth_kl_divergence(distributions: &[ProbabilityVector]) -> Result<f64> {
    if distributions.len() < 2 {
        return Err(LossError::SingleGranularity);
    }
    let len = distributions[0].len();
    if let Some(bad) = distributions.iter().find(|p| p.len() != len) {
        return Err(LossError::LevelMismatch {
            expected: len,
            found: bad.len(),
        });
    }
    let m = distributions.len() as f64;
    let mut total = 0.0;
    for j in 0..len {
        let mean = distributions.iter().map(|p| p.probs()[j]).sum::<f64>() / m;
        for p in distributions {
            total += entry(p.probs()[j], mean);
        }
    }
    Ok(total)
}

/// Value and logit gradient of the smooth-KL term for softmax distributions.
///
/// `logits[g][u]` is the logit of entry `u` at level `g`; entry `u` stands for
/// `multiplicity[u]` identical positions of the underlying distribution, so
/// each level's probabilities are `exp(z_u) / Σ_v c_v exp(z_v)` per position.
pub(crate) fn smooth_kl_core(
    logits: &[Vec<f64>],
    multiplicity: &[f64],
    mode: KlGradMode,
    want_grad: bool,
) -> (f64, Option<Vec<Vec<f64>>>) {
    let m = logits.len() as f64;
    let probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|z| {
            let lse = weighted_log_sum_exp(z, multiplicity);
            z.iter().map(|v| (v - lse).exp()).collect()
        })
        .collect();
    let mean: Vec<f64> = (0..multiplicity.len())
        .map(|u| probs.iter().map(|p| p[u]).sum::<f64>() / m)
        .collect();

    let mut acc = Accumulator::default();
    for p in &probs {
        for ((&pu, &mu), &c) in p.iter().zip(&mean).zip(multiplicity) {
            acc.add(c * entry(pu, mu));
        }
    }
    let value = acc.value();
    if !want_grad {
        return (value, None);
    }

    let grads = probs
        .iter()
        .map(|p| {
            let h: Vec<f64> = p
                .iter()
                .zip(&mean)
                .map(|(&pu, &mu)| {
                    let mut d = clamped_ln(pu) - clamped_ln(mu);
                    if pu > KL_CLAMP {
                        d += 1.0;
                    }
                    if mode == KlGradMode::Exact && mu > KL_CLAMP {
                        d -= 1.0;
                    }
                    d
                })
                .collect();
            let expected: f64 = p
                .iter()
                .zip(&h)
                .zip(multiplicity)
                .map(|((pu, hu), c)| c * pu * hu)
                .sum();
            p.iter()
                .zip(&h)
                .zip(multiplicity)
                .map(|((pu, hu), c)| c * pu * (hu - expected))
                .collect()
        })
        .collect();
    (value, Some(grads))
}

/// Smooth-KL value and gradient with respect to free per-level logits.
pub fn smooth_kl_logits(logits: &[Vec<f64>], mode: KlGradMode) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() < 2 {
        return Err(LossError::SingleGranularity);
    }
    let len = logits[0].len();
    if let Some(bad) = logits.iter().find(|z| z.len() != len) {
        return Err(LossError::LevelMismatch {
            expected: len,
            found: bad.len(),
        });
    }
    if len == 0 {
        return Err(LossError::EmptyBatch);
    }
    let ones = vec![1.0; len];
    let (value, grads) = smooth_kl_core(logits, &ones, mode, true);
    Ok((value, grads.expect("gradient requested")))
}
