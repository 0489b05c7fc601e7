//! Focal loss `FL(p_t) = -α_t (1 - p_t)^γ log(p_t)` and its logit gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Lower clamp on `p_t` before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalLossParams {
    pub gamma: f64,
    /// One balancing factor per class, each in `(0, 1]`.
    pub alpha: Vec<f64>,
}

impl Default for FocalLossParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: vec![0.5, 0.5],
        }
    }
}

impl FocalLossParams {
    /// Plain cross-entropy: `γ = 0`, `α = 1`.
    pub fn cross_entropy(classes: usize) -> Self {
        Self {
            gamma: 0.0,
            alpha: vec![1.0; classes],
        }
    }

    /// `α_c ∝ 1 / count_c`, normalized to sum to one.
    pub fn inverse_frequency(gamma: f64, class_counts: &[usize]) -> Result<Self> {
        if class_counts.contains(&0) {
            return Err(Error::config("loss.alpha", "a class has no training cases"));
        }
        let inv: Vec<f64> = class_counts.iter().map(|&c| 1.0 / c as f64).collect();
        let total: f64 = inv.iter().sum();
        let params = Self {
            gamma,
            alpha: inv.iter().map(|v| v / total).collect(),
        };
        params.validate(class_counts.len())?;
        Ok(params)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::config(
                "loss.gamma",
                "must be finite and non-negative",
            ));
        }
        if self.alpha.len() != classes {
            return Err(Error::config(
                "loss.alpha",
                format!("expected {classes} entries, got {}", self.alpha.len()),
            ));
        }
        if self.alpha.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::config("loss.alpha", "entries must lie in (0, 1]"));
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `(log p_t, 1 - p_t, softmax)` computed without cancellation.
fn target_terms(logits: &[f64], target: usize) -> (f64, f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_pt = (logits[target] - max - sum.ln()).max(PROB_FLOOR.ln());
    let probs = softmax(logits);
    let rest: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, p)| p)
        .sum();
    (log_pt, rest, probs)
}

fn check_inputs(logits: &[f64], target: usize, params: &FocalLossParams) -> Result<()> {
    if target >= logits.len() {
        return Err(Error::Usage(format!(
            "target {target} outside {} classes",
            logits.len()
        )));
    }
    if params.alpha.len() != logits.len() {
        return Err(Error::config("loss.alpha", "one entry per class required"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Usage("non-finite logits".into()));
    }
    Ok(())
}

/// Focal loss of one sample.
pub fn focal_loss(logits: &[f64], target: usize, params: &FocalLossParams) -> Result<f64> {
    check_inputs(logits, target, params)?;
    let (log_pt, q, _) = target_terms(logits, target);
    let modulation = if params.gamma == 0.0 {
        1.0
    } else {
        q.powf(params.gamma)
    };
    Ok(-params.alpha[target] * modulation * log_pt)
}

/// Gradient of [`focal_loss`] with respect to the logits.
///
/// `d FL / d z_j = α_t [γ (1-p_t)^(γ-1) p_t log p_t - (1-p_t)^γ] (δ_tj - p_j)`
pub fn focal_loss_gradient(
    logits: &[f64],
    target: usize,
    params: &FocalLossParams,
) -> Result<Vec<f64>> {
    check_inputs(logits, target, params)?;
    let (log_pt, q, probs) = target_terms(logits, target);
    let pt = probs[target];
    let gamma = params.gamma;
    let (modulation, focus) = if gamma == 0.0 {
        (1.0, 0.0)
    } else if q == 0.0 {
        (0.0, 0.0)
    } else {
        (q.powf(gamma), gamma * q.powf(gamma - 1.0) * pt * log_pt)
    };
    let coeff = params.alpha[target] * (focus - modulation);
    Ok(probs
        .iter()
        .enumerate()
        .map(|(j, &p)| coeff * (f64::from(u8::from(j == target)) - p))
        .collect())
}

/// Mean focal loss over a batch of logits `(batch, classes, 1, 1)` and the
/// gradient of that mean.
pub fn focal_loss_batch(
    logits: &FeatureMap,
    targets: &[usize],
    params: &FocalLossParams,
) -> Result<(f64, FeatureMap)> {
    let n = logits.batch();
    if targets.len() != n {
        return Err(Error::dimension("loss targets", n, targets.len()));
    }
    let mut grad = FeatureMap::zeros(logits.shape());
    let classes = logits.sample_len();
    let mut total = 0.0;
    for (s, &t) in targets.iter().enumerate() {
        let z = logits.sample(s);
        total += focal_loss(z, t, params)?;
        let g = focal_loss_gradient(z, t, params)?;
        for (dst, v) in grad.data_mut()[s * classes..(s + 1) * classes]
            .iter_mut()
            .zip(g)
        {
            *dst = v / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}
