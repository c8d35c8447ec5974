//! Small dense/convolutional networks with hand-written reverse mode.

pub mod layers;
pub mod student;
pub mod teacher;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
/// Planar R, G, B.
pub const IMAGE_LEN: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const N_CLASSES: usize = 10;

/// Temperature softmax with max subtraction, in `f64`.
pub fn softmax<T: Real>(logits: &[T], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    Ok(softmax_f64(logits, temperature))
}

pub(crate) fn softmax_f64<T: Real>(logits: &[T], temperature: f64) -> Vec<f64> {
    let max = logits.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|v| ((v.to_f64_lossy() - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln softmax(z/T)` computed stably.
pub(crate) fn log_softmax_f64<T: Real>(logits: &[T], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

/// Index of the largest entry (first on ties).
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of a batch of logits rows and its gradient.
pub fn cross_entropy<T: Real>(logits: &[T], n_classes: usize, labels: &[u8]) -> Result<(f64, Vec<T>)> {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    let scale = 1.0 / labels.len() as f64;
    for (row, &label) in logits.chunks(n_classes).zip(labels) {
        if label as usize >= n_classes {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        let p = softmax_f64(row, 1.0);
        loss -= p[label as usize].max(f64::MIN_POSITIVE).ln();
        for (k, pk) in p.into_iter().enumerate() {
            let y = if k == label as usize { 1.0 } else { 0.0 };
            grad.push(T::lit((pk - y) * scale));
        }
    }
    Ok((loss * scale, grad))
}
