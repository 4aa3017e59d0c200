//! Stable softmax and clipped cross-entropy, with backward passes.

use crate::error::{GzslError, Result};

/// Probabilities below this are clipped before taking the log.
pub const PROB_CLIP: f64 = 1e-12;

/// Max-subtracted softmax. Entries equal to `-inf` map to exactly zero;
/// a vector with no finite entry is an error.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(GzslError::EmptySupport);
    }
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Backward pass of softmax: given `probs = softmax(logits)` and the gradient
/// of the loss w.r.t. `probs`, returns the gradient w.r.t. `logits`.
pub fn softmax_backward(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    debug_assert_eq!(probs.len(), upstream.len());
    let inner: f64 = probs.iter().zip(upstream).map(|(p, u)| p * u).sum();
    probs
        .iter()
        .zip(upstream)
        .map(|(p, u)| p * (u - inner))
        .collect()
}

/// `-ln(max(probs[true_class], PROB_CLIP))`
pub fn cross_entropy(probs: &[f64], true_class: usize) -> Result<f64> {
    if true_class >= probs.len() {
        return Err(GzslError::arg(format!(
            "class index {true_class} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-probs[true_class].max(PROB_CLIP).ln())
}

/// Gradient of `cross_entropy` w.r.t. the probability vector. Zero in the
/// clipped region.
pub fn cross_entropy_backward(probs: &[f64], true_class: usize) -> Result<Vec<f64>> {
    if true_class >= probs.len() {
        return Err(GzslError::arg(format!(
            "class index {true_class} out of range for {} classes",
            probs.len()
        )));
    }
    let mut grad = vec![0.0; probs.len()];
    if probs[true_class] > PROB_CLIP {
        grad[true_class] = -1.0 / probs[true_class];
    }
    Ok(grad)
}

/// Gradient of `cross_entropy(softmax(logits), true_class)` w.r.t. the
/// logits: `probs - onehot(true_class)`.
pub fn softmax_cross_entropy_grad(probs: &[f64], true_class: usize) -> Vec<f64> {
    let mut grad = probs.to_vec();
    grad[true_class] -= 1.0;
    grad
}
