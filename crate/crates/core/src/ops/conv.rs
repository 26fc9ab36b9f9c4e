use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvParams {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams::new(1, 0, 1)
    }
}

/// `floor((input + 2*padding - kernel) / stride) + 1`, or `None` when that is below 1.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Validated geometry shared by the fast kernels and the reference kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub cin_per_group: usize,
    pub cout_per_group: usize,
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    p: ConvParams,
) -> Result<ConvGeometry> {
    let [n, cin, h, w] = input.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    if p.groups == 0 || p.stride == 0 {
        return Err(Error::shape("conv2d", "stride and groups must be positive"));
    }
    if cin % p.groups != 0 || cout % p.groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("groups {} must divide cin {} and cout {}", p.groups, cin, cout),
        ));
    }
    if wcin != cin / p.groups {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight expects {} input channels per group, input provides {}",
                wcin,
                cin / p.groups
            ),
        ));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} for {} output channels", b.len(), cout),
            ));
        }
    }
    let oh = conv_output_size(h, kh, p.stride, p.padding);
    let ow = conv_output_size(w, kw, p.stride, p.padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape(
            "conv2d",
            format!("{}x{} kernel does not fit {}x{} input", kh, kw, h, w),
        ));
    };
    Ok(ConvGeometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        cin_per_group: cin / p.groups,
        cout_per_group: cout / p.groups,
    })
}

/// 2-D convolution with symmetric zero padding and grouped channels.
///
/// 1x1 stride-1 kernels run as a tiled matrix product; everything else
/// (depthwise, the stem) runs as shifted multiply-accumulates over output rows.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&[f32]>, p: ConvParams) -> Result<Tensor> {
    let g = conv_geometry(input, weight, bias, p)?;
    let mut out = Tensor::zeros([g.n, g.cout, g.oh, g.ow]);
    if out.is_empty() {
        return Ok(out);
    }
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.oh * g.ow;
    let pointwise = g.kh == 1 && g.kw == 1 && p.stride == 1 && p.padding == 0 && p.groups == 1;
    let wdata = weight.data();
    out.data_mut()
        .par_chunks_mut(out_item)
        .zip(input.data().par_chunks(in_item))
        .for_each(|(dst, src)| {
            if let Some(b) = bias {
                let plane = g.oh * g.ow;
                for (co, &bv) in b.iter().enumerate() {
                    dst[co * plane..(co + 1) * plane].fill(bv);
                }
            }
            if pointwise {
                pointwise_item(src, wdata, dst, g.cin, g.cout, g.h * g.w);
            } else if g.cin_per_group == 1 && g.cout_per_group == 1 {
                depthwise_item(src, wdata, dst, &g, p);
            } else {
                direct_item(src, wdata, dst, &g, p);
            }
        });
    check_finite(out.data(), "conv2d")?;
    Ok(out)
}

const PIX_BLOCK: usize = 16;
const CH_BLOCK: usize = 4;

/// 1x1 convolution as `dst[co] += Σ_ci w[co, ci] · src[ci]`, accumulated in
/// input-channel order. Full blocks of 4 output channels × 16 pixels are kept in
/// registers; edges fall back to the same order one element at a time.
fn pointwise_item(src: &[f32], weight: &[f32], dst: &mut [f32], cin: usize, cout: usize, hw: usize) {
    let mut p = 0;
    while p + PIX_BLOCK <= hw {
        let mut co = 0;
        while co + CH_BLOCK <= cout {
            let mut acc = [[0f32; PIX_BLOCK]; CH_BLOCK];
            for (r, a) in acc.iter_mut().enumerate() {
                a.copy_from_slice(&dst[(co + r) * hw + p..(co + r) * hw + p + PIX_BLOCK]);
            }
            for ci in 0..cin {
                let x: &[f32; PIX_BLOCK] = src[ci * hw + p..ci * hw + p + PIX_BLOCK].try_into().unwrap();
                for (r, a) in acc.iter_mut().enumerate() {
                    let wv = weight[(co + r) * cin + ci];
                    for j in 0..PIX_BLOCK {
                        a[j] += wv * x[j];
                    }
                }
            }
            for (r, a) in acc.iter().enumerate() {
                dst[(co + r) * hw + p..(co + r) * hw + p + PIX_BLOCK].copy_from_slice(a);
            }
            co += CH_BLOCK;
        }
        for co in co..cout {
            let mut a: [f32; PIX_BLOCK] = dst[co * hw + p..co * hw + p + PIX_BLOCK].try_into().unwrap();
            for ci in 0..cin {
                let wv = weight[co * cin + ci];
                let x = &src[ci * hw + p..ci * hw + p + PIX_BLOCK];
                for j in 0..PIX_BLOCK {
                    a[j] += wv * x[j];
                }
            }
            dst[co * hw + p..co * hw + p + PIX_BLOCK].copy_from_slice(&a);
        }
        p += PIX_BLOCK;
    }
    if p < hw {
        for co in 0..cout {
            for q in p..hw {
                let mut a = dst[co * hw + q];
                for ci in 0..cin {
                    a += weight[co * cin + ci] * src[ci * hw + q];
                }
                dst[co * hw + q] = a;
            }
        }
    }
}

/// One filter per channel. Each plane is zero-padded (and split into stride
/// phases) once, so every tap is an unchecked contiguous multiply-accumulate.
fn depthwise_item(src: &[f32], weight: &[f32], dst: &mut [f32], g: &ConvGeometry, p: ConvParams) {
    let (h, w, oh, ow, kh, kw) = (g.h, g.w, g.oh, g.ow, g.kh, g.kw);
    let (stride, pad) = (p.stride, p.padding);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0f32; ph * pw];
    for c in 0..g.cin {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            padded[(y + pad) * pw + pad..(y + pad) * pw + pad + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
        }
        let (rows, row_len, phase_len) = if stride == 1 {
            (std::borrow::Cow::Borrowed(&padded[..]), pw, pw)
        } else {
            let (v, ppw) = deinterleave_rows(&padded, ph, pw, stride);
            (std::borrow::Cow::Owned(v), stride * ppw, ppw)
        };
        let taps = &weight[c * kh * kw..(c + 1) * kh * kw];
        let out_plane = &mut dst[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
            for ky in 0..kh {
                let iy = oy * stride + ky;
                let in_row = &rows[iy * row_len..(iy + 1) * row_len];
                for kx in 0..kw {
                    let wv = taps[ky * kw + kx];
                    let start = (kx % stride) * phase_len + kx / stride;
                    for (o, &x) in out_row.iter_mut().zip(&in_row[start..start + ow]) {
                        *o += wv * x;
                    }
                }
            }
        }
    }
}

/// Splits every input row into `stride` phases so that strided taps read
/// contiguous memory: element `x` lands at `phase (x % stride)`, index `x / stride`.
fn deinterleave_rows(src: &[f32], rows: usize, w: usize, stride: usize) -> (Vec<f32>, usize) {
    let pw = w.div_ceil(stride);
    let mut out = vec![0f32; rows * stride * pw];
    for r in 0..rows {
        let row = &src[r * w..(r + 1) * w];
        let dst = &mut out[r * stride * pw..(r + 1) * stride * pw];
        for (x, &v) in row.iter().enumerate() {
            dst[(x % stride) * pw + x / stride] = v;
        }
    }
    (out, pw)
}

fn direct_item(src: &[f32], weight: &[f32], dst: &mut [f32], g: &ConvGeometry, p: ConvParams) {
    let (h, w, oh, ow) = (g.h, g.w, g.oh, g.ow);
    let stride = p.stride;
    let pad = p.padding;
    let (phased, pw) = if stride == 1 {
        (std::borrow::Cow::Borrowed(src), w)
    } else {
        let (v, pw) = deinterleave_rows(src, g.cin * h, w, stride);
        (std::borrow::Cow::Owned(v), pw)
    };
    let row_len = stride * pw;
    for co in 0..g.cout {
        let group = co / g.cout_per_group;
        let out_plane = &mut dst[co * oh * ow..(co + 1) * oh * ow];
        for cig in 0..g.cin_per_group {
            let ci = group * g.cin_per_group + cig;
            let in_plane = &phased[ci * h * row_len..(ci + 1) * h * row_len];
            let kbase = (co * g.cin_per_group + cig) * g.kh * g.kw;
            for oy in 0..oh {
                let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                for ky in 0..g.kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &in_plane[iy as usize * row_len..(iy as usize + 1) * row_len];
                    for kx in 0..g.kw {
                        let wv = weight[kbase + ky * g.kw + kx];
                        let (lo, hi) = valid_range(ow, w, kx, stride, pad);
                        if lo >= hi {
                            continue;
                        }
                        let first = lo * stride + kx - pad;
                        let start = (first % stride) * pw + first / stride;
                        let s = &in_row[start..start + (hi - lo)];
                        for (o, &x) in out_row[lo..hi].iter_mut().zip(s) {
                            *o += wv * x;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` lies inside `[0, w)`.
#[inline]
fn valid_range(ow: usize, w: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    // largest ox with ox*stride + kx - pad <= w - 1
    let limit = w + pad;
    let hi = if limit <= kx {
        0
    } else {
        ((limit - 1 - kx) / stride + 1).min(ow)
    };
    (lo, hi.max(lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::reference::conv2d_reference;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn max_rel_err(a: &[f32], b: &[f32]) -> f64 {
        let scale = b.iter().fold(0f64, |m, v| m.max(v.abs() as f64)).max(1e-30);
        a.iter()
            .zip(b)
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .fold(0.0, f64::max)
            / scale
    }

    #[test]
    fn identity_kernel_returns_input() {
        let x = Tensor::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let wt = Tensor::full([1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &wt, None, ConvParams::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weight_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, [2, 4, 7, 5]);
        let wt = Tensor::zeros([3, 4, 3, 3]);
        let y = conv2d(&x, &wt, Some(&[0.5, -1.0, 2.0]), ConvParams::new(2, 1, 1)).unwrap();
        for co in 0..3 {
            let expected = [0.5, -1.0, 2.0][co];
            for n in 0..2 {
                for i in 0..y.h() {
                    for j in 0..y.w() {
                        assert_eq!(y.at(n, co, i, j), expected);
                    }
                }
            }
        }
    }

    #[test]
    fn strided_padded_conv_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, [1, 4, 8, 8]);
        let wt = random_tensor(&mut rng, [6, 4, 3, 3]);
        let p = ConvParams::new(2, 1, 1);
        let fast = conv2d(&x, &wt, None, p).unwrap();
        let slow = conv2d_reference(&x, &wt, None, p).unwrap();
        assert_eq!(fast.shape(), [1, 6, 4, 4]);
        assert!(max_rel_err(fast.data(), slow.data()) <= 1e-5);
    }

    #[test]
    fn rejects_bad_groups_and_oversized_kernel() {
        let x = Tensor::zeros([1, 4, 2, 2]);
        assert!(conv2d(&x, &Tensor::zeros([6, 1, 1, 1]), None, ConvParams::new(1, 0, 4)).is_err());
        assert!(conv2d(&x, &Tensor::zeros([4, 4, 3, 3]), None, ConvParams::new(1, 0, 1)).is_err());
        assert!(conv2d(&x, &Tensor::zeros([4, 4, 1, 1]), Some(&[0.0; 3]), ConvParams::default()).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::full([1, 1, 2, 2], f32::MAX);
        let wt = Tensor::full([1, 1, 1, 1], 4.0);
        assert!(matches!(
            conv2d(&x, &wt, None, ConvParams::default()),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn depthwise_equals_per_channel_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 5;
        let x = random_tensor(&mut rng, [2, c, 9, 9]);
        let wt = random_tensor(&mut rng, [c, 1, 3, 3]);
        let p = ConvParams::new(2, 1, c);
        let dw = conv2d(&x, &wt, None, p).unwrap();
        for ch in 0..c {
            for n in 0..2 {
                let xc = Tensor::from_vec([1, 1, 9, 9], x.item(n)[ch * 81..(ch + 1) * 81].to_vec()).unwrap();
                let wc = Tensor::from_vec([1, 1, 3, 3], wt.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
                let yc = conv2d(&xc, &wc, None, ConvParams::new(2, 1, 1)).unwrap();
                let plane = dw.h() * dw.w();
                let got = &dw.item(n)[ch * plane..(ch + 1) * plane];
                assert_eq!(got, yc.data());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn output_shape_follows_formula(
            k in prop::sample::select(vec![1usize, 3]),
            stride in 1usize..=2,
            padding in 0usize..=1,
            h in 1usize..12,
            w in 1usize..12,
        ) {
            let x = Tensor::zeros([1, 2, h, w]);
            let wt = Tensor::zeros([2, 2, k, k]);
            let res = conv2d(&x, &wt, None, ConvParams::new(stride, padding, 1));
            let expect_h = (h + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
            let expect_w = (w + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
            match (expect_h, expect_w) {
                (Some(eh), Some(ew)) => prop_assert_eq!(res.unwrap().shape(), [1, 2, eh, ew]),
                _ => prop_assert!(res.is_err()),
            }
        }

        #[test]
        fn conv_is_linear(seed in any::<u64>(), a in -2.0f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, [1, 3, 6, 6]);
            let y = random_tensor(&mut rng, [1, 3, 6, 6]);
            let wt = random_tensor(&mut rng, [4, 3, 3, 3]);
            let p = ConvParams::new(1, 1, 1);
            let combo: Vec<f32> = x.data().iter().zip(y.data()).map(|(u, v)| a * u + v).collect();
            let combo = Tensor::from_vec(x.shape(), combo).unwrap();
            let lhs = conv2d(&combo, &wt, None, p).unwrap();
            let cx = conv2d(&x, &wt, None, p).unwrap();
            let cy = conv2d(&y, &wt, None, p).unwrap();
            let rhs: Vec<f32> = cx.data().iter().zip(cy.data()).map(|(u, v)| a * u + v).collect();
            prop_assert!(max_rel_err(lhs.data(), &rhs) <= 1e-5);
        }
    }
}
