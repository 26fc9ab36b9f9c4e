use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_row(out.row_mut(i));
    }
    out
}

fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f64;
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| {
            let e = ((v - max) as f64).exp();
            sum += e;
            e
        })
        .collect();
    for (r, e) in row.iter_mut().zip(exps) {
        *r = (e / sum) as f32;
    }
}

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / n`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f32, Matrix)> {
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_xent",
            format!("{} labels for {} rows", labels.len(), n),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("softmax_xent on empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax_xent" });
    }
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label] as f64;
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] as f64 - log_z).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            *g = ((p - target) / n as f64) as f32;
        }
    }
    Ok(((total / n as f64) as f32, grad))
}
