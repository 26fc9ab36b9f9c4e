//! Naive loop kernels, kept deliberately simple. They accumulate in double
//! precision and serve as the oracles for the fast kernels.

use super::batchnorm::BatchNorm;
use super::conv::{conv_geometry, ConvParams};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

pub fn conv2d_reference(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    p: ConvParams,
) -> Result<Tensor> {
    let g = conv_geometry(input, weight, bias, p)?;
    let mut out = Tensor::zeros([g.n, g.cout, g.oh, g.ow]);
    for n in 0..g.n {
        for co in 0..g.cout {
            let group = co / g.cout_per_group;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = bias.map_or(0.0, |b| b[co] as f64);
                    for cig in 0..g.cin_per_group {
                        let ci = group * g.cin_per_group + cig;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += weight.at(co, cig, ky, kx) as f64
                                    * input.at(n, ci, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                    let idx = out.offset(n, co, oy, ox);
                    out.data_mut()[idx] = acc as f32;
                }
            }
        }
    }
    Ok(out)
}

pub fn linear_reference(x: &Matrix, w: &Matrix, b: &[f32]) -> Result<Matrix> {
    if x.cols() != w.cols() || b.len() != w.rows() {
        return Err(Error::shape("linear_reference", "dimension mismatch"));
    }
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        for j in 0..w.rows() {
            let mut acc = b[j] as f64;
            for k in 0..x.cols() {
                acc += x.get(i, k) as f64 * w.get(j, k) as f64;
            }
            out.row_mut(i)[j] = acc as f32;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_reference(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for i in 0..n {
        for ch in 0..c {
            let mut acc = 0f64;
            for y in 0..h {
                for xx in 0..w {
                    acc += x.at(i, ch, y, xx) as f64;
                }
            }
            out.data_mut()[i * c + ch] = (acc / (h * w) as f64) as f32;
        }
    }
    out
}

/// Inference-mode batch normalization applied as a separate pass.
pub fn batch_norm_reference(x: &Tensor, bn: &BatchNorm, eps: f32) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if bn.len() != c {
        return Err(Error::shape("batch_norm_reference", "channel mismatch"));
    }
    let mut out = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let scale = bn.gamma[ch] as f64 / (bn.var[ch] as f64 + eps as f64).sqrt();
            for y in 0..h {
                for xx in 0..w {
                    let idx = out.offset(i, ch, y, xx);
                    let v = x.data()[idx] as f64;
                    out.data_mut()[idx] =
                        ((v - bn.mean[ch] as f64) * scale + bn.beta[ch] as f64) as f32;
                }
            }
        }
    }
    Ok(out)
}
