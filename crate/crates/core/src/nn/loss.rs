//! Numerically stable softmax and categorical cross-entropy.

use crate::error::{Error, Result};

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Returns `(probabilities, loss)`; the logit gradient is `p - onehot`.
pub fn softmax_xent(logits: &[f64], onehot: &[f64]) -> Result<(Vec<f64>, f64)> {
    if logits.len() < 2 || logits.len() != onehot.len() {
        return Err(Error::shape(format!(
            "softmax_xent: {} logits vs {} targets",
            logits.len(),
            onehot.len()
        )));
    }
    let ones = onehot.iter().filter(|&&v| v == 1.0).count();
    let zeros = onehot.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != onehot.len() {
        return Err(Error::config("target is not one-hot"));
    }
    let class = onehot.iter().position(|&v| v == 1.0).unwrap_or_default();
    softmax_xent_class(logits, class)
}

pub fn softmax_xent_class(logits: &[f64], class: usize) -> Result<(Vec<f64>, f64)> {
    if logits.len() < 2 || class >= logits.len() {
        return Err(Error::shape(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    let loss = log_sum - (logits[class] - max);
    Ok((softmax(logits), loss))
}
