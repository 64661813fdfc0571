use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean cross-entropy over a `(batch, K)` logit tensor, and its gradient
/// with respect to the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    if logits.shape().len() != 2 {
        return Err(Error::shape(format!("logits must be (batch, K), got {:?}", logits.shape())));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut grad = vec![T::zero(); n * k];
    let mut total = 0.0;
    for (i, (&y, row)) in labels.iter().zip(logits.data().chunks(k)).enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[y].f64();
        for j in 0..k {
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad[i * k + j] = T::of((exps[j] / z - onehot) / n as f64);
        }
    }
    Ok((total / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// Softmax probabilities, row-wise.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let k = logits.item_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}
