use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over a batch of logits `[S, V]`.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(softmax - onehot) / S`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (s, v) = match logits.shape() {
        &[s, v] => (s, v),
        other => {
            return Err(Error::Shape(format!(
                "logits must be [S, V], got {other:?}"
            )))
        }
    };
    if labels.len() != s {
        return Err(Error::Shape(format!(
            "{} labels for {s} rows of logits",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= v) {
        return Err(Error::Label { label, classes: v });
    }
    let mut grad = vec![0.0; s * v];
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z as f64));
        let sum: f64 = row.iter().map(|&z| (z as f64 - max).exp()).sum();
        let log_norm = max + sum.ln();
        total += log_norm - row[y] as f64;
        for (j, &z) in row.iter().enumerate() {
            let p = (z as f64 - log_norm).exp();
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad[i * v + j] = ((p - onehot) / s as f64) as Scalar;
        }
    }
    let loss = total / s as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross entropy".into()));
    }
    Ok((loss, Tensor::new(vec![s, v], grad)?))
}
