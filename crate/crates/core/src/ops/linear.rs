use crate::error::{Error, Result};
use crate::tensor::{check_finite, Matrix};

/// `x · wᵀ + b` for `x: [n, din]`, `w: [dout, din]`, `b: [dout]`.
pub fn linear(x: &Matrix, w: &Matrix, b: &[f32]) -> Result<Matrix> {
    if x.cols() != w.cols() {
        return Err(Error::shape(
            "linear",
            format!("input width {} vs weight width {}", x.cols(), w.cols()),
        ));
    }
    if b.len() != w.rows() {
        return Err(Error::shape(
            "linear",
            format!("bias length {} vs {} outputs", b.len(), w.rows()),
        ));
    }
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            let wj = w.row(j);
            *o = b[j] + xi.iter().zip(wj).map(|(a, c)| a * c).sum::<f32>();
        }
    }
    check_finite(out.data(), "linear")?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrad {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

/// Parameter gradients of [`linear`] given the upstream gradient `dy: [n, dout]`.
pub fn linear_backward(x: &Matrix, dy: &Matrix) -> Result<LinearGrad> {
    if x.rows() != dy.rows() {
        return Err(Error::shape("linear_backward", "batch size mismatch"));
    }
    let mut weight = Matrix::zeros(dy.cols(), x.cols());
    let mut bias = vec![0f32; dy.cols()];
    for i in 0..x.rows() {
        let xi = x.row(i);
        for (j, &g) in dy.row(i).iter().enumerate() {
            bias[j] += g;
            for (wv, &xv) in weight.row_mut(j).iter_mut().zip(xi) {
                *wv += g * xv;
            }
        }
    }
    Ok(LinearGrad { weight, bias })
}
