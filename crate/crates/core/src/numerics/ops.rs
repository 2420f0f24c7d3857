//! Value-level softmax and losses. Each loss returns its value together with
//! the gradient with respect to its input, which is what the tape records.

use super::matrix::Matrix;
use crate::{DfaError, Result};

/// Max-subtracted softmax of a single logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DfaError::NonFinite("softmax logits".into()));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    if !logits.is_finite() {
        return Err(DfaError::NonFinite("softmax logits".into()));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r)
            .copy_from_slice(&softmax_unchecked(logits.row(r)));
    }
    Ok(out)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of row-wise logits against class labels, with the
/// gradient `(softmax - onehot) / rows`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(DfaError::shape(
            "cross_entropy",
            format!("{} labels for {} rows", labels.len(), logits.rows()),
        ));
    }
    if logits.rows() == 0 {
        return Err(DfaError::shape("cross_entropy", "empty batch"));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(DfaError::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    if !logits.is_finite() {
        return Err(DfaError::NonFinite("cross_entropy logits".into()));
    }
    let n = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        loss += log_sum_exp(row) - row[y];
        let p = softmax_unchecked(row);
        let g = grad.row_mut(r);
        for (c, pc) in p.into_iter().enumerate() {
            g[c] = pc / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Mean over every entry of `(p - 1/k)^2` for a batch of length-`k`
/// probability rows. The gradient is with respect to the probabilities.
pub fn mse_uniform(probs: &Matrix, k: usize) -> Result<(f64, Matrix)> {
    if probs.cols() != k || k == 0 {
        return Err(DfaError::shape(
            "mse_uniform",
            format!("probability rows of length {} with k = {k}", probs.cols()),
        ));
    }
    if probs.is_empty() {
        return Err(DfaError::shape("mse_uniform", "empty batch"));
    }
    let target = 1.0 / k as f64;
    let count = probs.len() as f64;
    let loss = probs
        .as_slice()
        .iter()
        .map(|p| (p - target).powi(2))
        .sum::<f64>()
        / count;
    let grad = probs.map(|p| 2.0 * (p - target) / count);
    Ok((loss, grad))
}
