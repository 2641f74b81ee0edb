use super::layers::sigmoid;
use super::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-12;

/// Mean binary cross-entropy `-[y ln p + (1-y) ln(1-p)]` and its gradient
/// with respect to `probs`. Inside the clamp region the gradient is zero.
pub fn bce_loss(probs: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    if probs.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            expected: probs.shape().to_vec(),
            found: labels.shape().to_vec(),
        });
    }
    let n = probs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(probs.shape());
    for ((&p, &y), g) in probs.data().iter().zip(labels.data()).zip(grad.data_mut()) {
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        if p > BCE_EPS && p < 1.0 - BCE_EPS {
            *g = (-y / pc + (1.0 - y) / (1.0 - pc)) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Sigmoid followed by mean BCE, from logits. Returns the loss (with the same
/// clamping as [`bce_loss`]) and the gradient with respect to the logits,
/// `(sigmoid(z) - y) / n`, which stays informative when the sigmoid saturates.
pub fn sigmoid_bce(logits: &[f64], labels: &[f64], grad: &mut [f64]) -> f64 {
    debug_assert_eq!(logits.len(), labels.len());
    let n = logits.len() as f64;
    let mut loss = 0.0;
    for ((&z, &y), g) in logits.iter().zip(labels).zip(grad.iter_mut()) {
        let p = sigmoid(z);
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        *g = (p - y) / n;
    }
    loss / n
}
