use crate::error::{config, usage, Result};

use super::Tensor;

/// Mean softmax cross-entropy over a `B×K` logit batch and its gradient.
///
/// `dlogits = (softmax − one_hot) / B`. Rows are shifted by their maximum first.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    if logits.rank() != 2 {
        return config(format!("logits must be B×K, got {:?}", logits.shape()));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return usage(format!("{} labels for a batch of {b}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return usage(format!("label {bad} out of range for {k} classes"));
    }
    let inv_b = 1.0 / b as f32;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(b * k);
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        // (max − z_y) ≥ 0 and ln(sum) ≥ 0 since sum ≥ 1
        total += ((max - row[y]) + sum.ln()) as f64;
        for (j, e) in exps.iter().enumerate() {
            let p = e / sum;
            let t = if j == y { 1.0 } else { 0.0 };
            grad.push((p - t) * inv_b);
        }
    }
    Ok(((total / b as f64) as f32, Tensor::new(vec![b, k], grad)?))
}
