use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of softmax(logits) against integer labels, with the
/// gradient `(softmax - onehot) / B` w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!("logits must be 2-D, got {:?}", logits.shape())));
    }
    let (rows, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} logit rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    if rows == 0 {
        return Ok((0.0, logits.clone()));
    }
    let inv_b = 1.0 / rows as f64;
    let mut grad = vec![0.0; rows * classes];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = &mut grad[i * classes..(i + 1) * classes];
        let mut sum = 0.0;
        for (e, &z) in g.iter_mut().zip(row) {
            *e = (z - max).exp();
            sum += *e;
        }
        let log_sum = sum.ln();
        total += log_sum - (row[label] - max);
        for e in g.iter_mut() {
            *e = *e / sum * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((total * inv_b, Tensor::new(vec![rows, classes], grad)?))
}

/// Mean over rows of the squared l2 distance, with gradient
/// `2 (features - targets) / B`.
pub fn mse_feature_loss(features: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    features.check_same_shape(targets, "feature loss")?;
    let rows = features.rows();
    if rows == 0 {
        return Ok((0.0, features.clone()));
    }
    let inv_b = 1.0 / rows as f64;
    let mut total = 0.0;
    let grad: Vec<f64> = features
        .data()
        .iter()
        .zip(targets.data())
        .map(|(f, t)| {
            let d = f - t;
            total += d * d;
            2.0 * d * inv_b
        })
        .collect();
    Ok((total * inv_b, Tensor::new(features.shape().to_vec(), grad)?))
}
