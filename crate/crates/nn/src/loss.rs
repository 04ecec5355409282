//! Cross-entropy and focal loss over softmax class probabilities.
//!
//! Focal loss scales the true-class cross-entropy by `(1 - p_t)^γ`, which
//! shrinks the contribution of examples the model already classifies well.
//! `γ = 0` recovers plain cross-entropy.

use ndarray::Array2;
use thiserror::Error;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("probabilities must be non-negative and sum to 1 (sum = {sum})")]
    InvalidSimplex { sum: f64 },
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("gamma must be finite and non-negative, got {0}")]
    InvalidGamma(f64),
}

fn check(probs_len: usize, true_class: usize, gamma: f64) -> Result<(), LossError> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(LossError::InvalidGamma(gamma));
    }
    if true_class >= probs_len {
        return Err(LossError::ClassOutOfRange {
            index: true_class,
            classes: probs_len,
        });
    }
    Ok(())
}

/// `-(1 - p_t)^γ · ln p_t` for one probability vector.
pub fn focal_loss(probs: &[f64], true_class: usize, gamma: f64) -> Result<f64, LossError> {
    check(probs.len(), true_class, gamma)?;
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(LossError::InvalidSimplex { sum });
    }
    let p_t = probs[true_class].clamp(PROB_FLOOR, 1.0);
    Ok(-(1.0 - p_t).powf(gamma) * p_t.ln())
}

pub fn cross_entropy(probs: &[f64], true_class: usize) -> Result<f64, LossError> {
    focal_loss(probs, true_class, 0.0)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Focal loss of `softmax(logits)` and its gradient with respect to the logits.
///
/// Uses log-softmax for `ln p_t`, so no clamping is needed on this path.
pub fn focal_loss_with_grad(logits: &[f64], true_class: usize, gamma: f64) -> Result<(f64, Vec<f64>), LossError> {
    check(logits.len(), true_class, gamma)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let log_pt = logits[true_class] - log_norm;
    let p_t = log_pt.exp();
    let q = 1.0 - p_t;
    let loss = -q.powf(gamma) * log_pt;

    // dL/dp_t · p_t, written without dividing by p_t.
    let focus = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p_t * log_pt
    };
    let scale = focus - q.powf(gamma);
    let grad = logits
        .iter()
        .enumerate()
        .map(|(j, z)| {
            let p_j = (z - log_norm).exp();
            let indicator = if j == true_class { 1.0 } else { 0.0 };
            scale * (indicator - p_j)
        })
        .collect();
    Ok((loss, grad))
}

/// Mean loss over a batch of logits and the gradient of that mean.
pub fn batch_focal_loss(logits: &Array2<f32>, targets: &[usize], gamma: f64) -> Result<(f64, Array2<f32>), LossError> {
    let n = logits.nrows();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, &target) in targets.iter().enumerate().take(n) {
        let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
        let (loss, g) = focal_loss_with_grad(&row, target, gamma)?;
        total += loss;
        for (dst, src) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = (src / n as f64) as f32;
        }
    }
    Ok((total / n as f64, grad))
}
