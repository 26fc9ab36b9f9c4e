use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inference-time batch normalization statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// Folds `bn` into the preceding convolution:
/// `w' = w * gamma / sqrt(var + eps)` per output channel and
/// `b' = beta + (b - mean) * gamma / sqrt(var + eps)`.
pub fn fold_batchnorm(
    weight: &Tensor,
    bias: Option<&[f32]>,
    bn: &BatchNorm,
    eps: f32,
) -> Result<(Tensor, Vec<f32>)> {
    let cout = weight.shape()[0];
    let lens = [bn.gamma.len(), bn.beta.len(), bn.mean.len(), bn.var.len()];
    if lens.iter().any(|&l| l != cout) || bias.is_some_and(|b| b.len() != cout) {
        return Err(Error::shape(
            "fold_batchnorm",
            format!("parameter lengths {:?} for {} output channels", lens, cout),
        ));
    }
    if bn.var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("batch-norm variance must be non-negative".into()));
    }
    let per_channel = weight.len() / cout.max(1);
    let mut folded = weight.clone();
    let mut new_bias = Vec::with_capacity(cout);
    for co in 0..cout {
        let scale = bn.gamma[co] as f64 / (bn.var[co] as f64 + eps as f64).sqrt();
        for v in &mut folded.data_mut()[co * per_channel..(co + 1) * per_channel] {
            *v = (*v as f64 * scale) as f32;
        }
        let b = bias.map_or(0.0, |b| b[co] as f64);
        new_bias.push((bn.beta[co] as f64 + (b - bn.mean[co] as f64) * scale) as f32);
    }
    folded.check_finite("fold_batchnorm")?;
    Ok((folded, new_bias))
}
