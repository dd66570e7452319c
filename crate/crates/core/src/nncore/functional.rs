//! Forward kernels on plain tensors.
//!
//! Spatial maps use `h x w x c` layout, which is the same buffer as an
//! `(h*w) x c` matrix; the autodiff graph relies on that equivalence.

use super::tensor::{gemm, Tensor};
use crate::error::{contract, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Single-head scaled dot-product attention.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    contract!(
        q.shape().len() == 2 && k.shape().len() == 2 && v.shape().len() == 2,
        "attention expects matrices"
    );
    let (nq, dk) = (q.rows(), q.cols());
    contract!(dk > 0, "attention key width must be positive");
    contract!(k.cols() == dk, "attention: Q width {} != K width {}", dk, k.cols());
    contract!(
        k.rows() == v.rows(),
        "attention: K has {} rows but V has {}",
        k.rows(),
        v.rows()
    );
    contract!(
        q.is_finite() && k.is_finite() && v.is_finite(),
        "attention inputs must be finite"
    );
    let nk = k.rows();
    let mut scores = vec![0.0; nq * nk];
    gemm(q.data(), nq, dk, false, k.data(), nk, dk, true, &mut scores, false);
    let scale = 1.0 / (dk as f64).sqrt();
    scores.iter_mut().for_each(|s| *s *= scale);
    softmax_rows_in_place(&mut scores, nk);
    let dv = v.cols();
    let mut out = vec![0.0; nq * dv];
    gemm(&scores, nq, nk, false, v.data(), nk, dv, false, &mut out, false);
    Tensor::new(&[nq, dv], out)
}

pub(crate) fn softmax_rows_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    softmax_rows_in_place(out.data_mut(), c);
    out
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    contract!(d >= 2, "layer_norm needs at least two features, got {d}");
    contract!(gain.len() == d && bias.len() == d, "layer_norm affine width mismatch");
    let (y, _, _) = layer_norm_fwd(x.data(), d, gain.data(), bias.data());
    Tensor::new(x.shape(), y)
}

/// Returns (output, normalized input, reciprocal std per row).
pub(crate) fn layer_norm_fwd(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (xr[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

/// Geometry of a square-kernel convolution over an `h x w x c_in` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        contract!(k >= 1 && stride >= 1, "kernel and stride must be positive");
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        contract!(
            span_h >= k && span_w >= k,
            "kernel {k} larger than padded input {span_h}x{span_w}"
        );
        contract!(
            (span_h - k) % stride == 0 && (span_w - k) % stride == 0,
            "non-integral output extent for input {h}x{w}, kernel {k}, stride {stride}, pad {pad}"
        );
        Ok(Self {
            h,
            w,
            c_in,
            c_out,
            k,
            stride,
            pad,
            h_out: (span_h - k) / stride + 1,
            w_out: (span_w - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c_in
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pl = g.patch_len();
    let mut cols = vec![0.0; g.h_out * g.w_out * pl];
    for oi in 0..g.h_out {
        for oj in 0..g.w_out {
            let base = (oi * g.w_out + oj) * pl;
            for ki in 0..g.k {
                let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                if ii < 0 || ii >= g.h as isize {
                    continue;
                }
                for kj in 0..g.k {
                    let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                    if jj < 0 || jj >= g.w as isize {
                        continue;
                    }
                    let src = (ii as usize * g.w + jj as usize) * g.c_in;
                    let dst = base + (ki * g.k + kj) * g.c_in;
                    cols[dst..dst + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pl = g.patch_len();
    let mut x = vec![0.0; g.h * g.w * g.c_in];
    for oi in 0..g.h_out {
        for oj in 0..g.w_out {
            let base = (oi * g.w_out + oj) * pl;
            for ki in 0..g.k {
                let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                if ii < 0 || ii >= g.h as isize {
                    continue;
                }
                for kj in 0..g.k {
                    let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                    if jj < 0 || jj >= g.w as isize {
                        continue;
                    }
                    let dst = (ii as usize * g.w + jj as usize) * g.c_in;
                    let src = base + (ki * g.k + kj) * g.c_in;
                    for c in 0..g.c_in {
                        x[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
    x
}

fn spatial(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    contract!(x.shape().len() == 3, "{what} expects an h x w x c map, got {:?}", x.shape());
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Resolves the geometry of `conv2d(x, kernel)` with kernel layout `k x k x c_in x c_out`.
pub fn conv_geom(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (h, w, c) = spatial(x, "conv2d")?;
    let ks = kernel.shape();
    contract!(
        ks.len() == 4 && ks[0] == ks[1] && ks[2] == c,
        "conv2d kernel {:?} incompatible with input channels {c}",
        ks
    );
    ConvGeom::new(h, w, c, ks[3], ks[0], stride, pad)
}

/// Cross-correlation of an `h x w x c_in` map with a `k x k x c_in x c_out` kernel.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(x, kernel, stride, pad)?;
    Ok(conv2d_with(x.data(), kernel.data(), &g))
}

pub(crate) fn conv2d_with(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Tensor {
    let cols = im2col(x, g);
    let rows = g.h_out * g.w_out;
    let mut out = vec![0.0; rows * g.c_out];
    gemm(
        &cols,
        rows,
        g.patch_len(),
        false,
        kernel,
        g.patch_len(),
        g.c_out,
        false,
        &mut out,
        false,
    );
    Tensor::new(&[g.h_out, g.w_out, g.c_out], out).expect("conv output shape")
}

/// Geometry of the stride-2 conv whose adjoint `tconv2d(x, kernel)` is.
///
/// The kernel has the layout of that forward conv, `k x k x c_out x c_in`,
/// where `c_in` is the channel count of `x` and `c_out` of the result.
pub fn tconv_geom(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<ConvGeom> {
    let (h, w, c) = spatial(x, "tconv2d")?;
    contract!(stride == 2, "tconv2d supports stride 2 only, got {stride}");
    let ks = kernel.shape();
    contract!(
        ks.len() == 4 && ks[0] == 2 && ks[1] == 2,
        "tconv2d supports 2x2 kernels only, got {:?}",
        ks
    );
    contract!(ks[3] == c, "tconv2d kernel {:?} incompatible with input channels {c}", ks);
    let g = ConvGeom::new(2 * h, 2 * w, ks[2], c, 2, 2, 0)?;
    debug_assert_eq!((g.h_out, g.w_out), (h, w));
    Ok(g)
}

/// Transposed stride-2 convolution: `h x w x c_in -> 2h x 2w x c_out`.
pub fn tconv2d(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let g = tconv_geom(x, kernel, stride)?;
    Ok(tconv2d_with(x.data(), kernel.data(), &g))
}

pub(crate) fn tconv2d_with(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Tensor {
    let rows = g.h_out * g.w_out;
    let mut cols = vec![0.0; rows * g.patch_len()];
    gemm(
        x,
        rows,
        g.c_out,
        false,
        kernel,
        g.patch_len(),
        g.c_out,
        true,
        &mut cols,
        false,
    );
    let y = col2im(&cols, g);
    Tensor::new(&[g.h, g.w, g.c_in], y).expect("tconv output shape")
}

/// Source taps for one axis of a half-pixel-centred bilinear resize.
#[derive(Debug, Clone)]
pub(crate) struct AxisTaps {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn axis_taps(src: usize, dst: usize) -> AxisTaps {
    let scale = src as f64 / dst as f64;
    let mut t = AxisTaps {
        i0: Vec::with_capacity(dst),
        i1: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for o in 0..dst {
        let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        t.i0.push(i0);
        t.i1.push(i1);
        t.frac.push(s - i0 as f64);
    }
    t
}

/// Bilinear resize of an `h x w x c` map (half-pixel centres, edge clamped).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = spatial(x, "resize_bilinear")?;
    let th = axis_taps(h, out_h);
    let tw = axis_taps(w, out_w);
    Ok(resize_with(x.data(), h, w, c, &th, &tw))
}

pub(crate) fn resize_with(x: &[f64], _h: usize, w: usize, c: usize, th: &AxisTaps, tw: &AxisTaps) -> Tensor {
    let (oh, ow) = (th.i0.len(), tw.i0.len());
    let mut out = vec![0.0; oh * ow * c];
    for oi in 0..oh {
        let (a0, a1, fa) = (th.i0[oi], th.i1[oi], th.frac[oi]);
        for oj in 0..ow {
            let (b0, b1, fb) = (tw.i0[oj], tw.i1[oj], tw.frac[oj]);
            let w00 = (1.0 - fa) * (1.0 - fb);
            let w01 = (1.0 - fa) * fb;
            let w10 = fa * (1.0 - fb);
            let w11 = fa * fb;
            for ch in 0..c {
                out[(oi * ow + oj) * c + ch] = w00 * x[(a0 * w + b0) * c + ch]
                    + w01 * x[(a0 * w + b1) * c + ch]
                    + w10 * x[(a1 * w + b0) * c + ch]
                    + w11 * x[(a1 * w + b1) * c + ch];
            }
        }
    }
    Tensor::new(&[oh, ow, c], out).expect("resize output shape")
}

pub(crate) fn resize_backward(dy: &[f64], h: usize, w: usize, c: usize, th: &AxisTaps, tw: &AxisTaps) -> Vec<f64> {
    let (oh, ow) = (th.i0.len(), tw.i0.len());
    let mut dx = vec![0.0; h * w * c];
    for oi in 0..oh {
        let (a0, a1, fa) = (th.i0[oi], th.i1[oi], th.frac[oi]);
        for oj in 0..ow {
            let (b0, b1, fb) = (tw.i0[oj], tw.i1[oj], tw.frac[oj]);
            let w00 = (1.0 - fa) * (1.0 - fb);
            let w01 = (1.0 - fa) * fb;
            let w10 = fa * (1.0 - fb);
            let w11 = fa * fb;
            for ch in 0..c {
                let g = dy[(oi * ow + oj) * c + ch];
                dx[(a0 * w + b0) * c + ch] += w00 * g;
                dx[(a0 * w + b1) * c + ch] += w01 * g;
                dx[(a1 * w + b0) * c + ch] += w10 * g;
                dx[(a1 * w + b1) * c + ch] += w11 * g;
            }
        }
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Index permutation for a 2x depth-to-space rearrangement:
/// `h x w x 4c -> 2h x 2w x c`. Entry `i` of the result is the source index of
/// output element `i`.
pub fn pixel_shuffle_perm(h: usize, w: usize, c4: usize) -> Vec<usize> {
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut perm = Vec::with_capacity(oh * ow * c);
    for oi in 0..oh {
        for oj in 0..ow {
            let (i, a) = (oi / 2, oi % 2);
            let (j, b) = (oj / 2, oj % 2);
            for ch in 0..c {
                perm.push((i * w + j) * c4 + (a * 2 + b) * c + ch);
            }
        }
    }
    perm
}

/// 2-D sinusoidal position code for an `h x w` grid, `c` channels (c divisible by 4).
pub fn sincos_position_code(h: usize, w: usize, c: usize) -> Tensor {
    let quarter = (c / 4).max(1);
    let mut out = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * c;
            for f in 0..quarter {
                let freq = 1.0 / 100f64.powf(f as f64 / quarter as f64);
                let y = (i as f64 + 0.5) / h as f64 * std::f64::consts::PI * freq * 4.0;
                let x = (j as f64 + 0.5) / w as f64 * std::f64::consts::PI * freq * 4.0;
                let vals = [y.sin(), y.cos(), x.sin(), x.cos()];
                for (q, v) in vals.iter().enumerate() {
                    let idx = q * quarter + f;
                    if idx < c {
                        out[base + idx] = *v;
                    }
                }
            }
        }
    }
    Tensor::new(&[h * w, c], out).expect("position code shape")
}
