//! Raw tensor kernels: forward functions and the matching vector-Jacobian
//! products. Nothing here touches the tape.
//!
//! All kernels are deterministic. Matrix products parallelize over output
//! rows, and every output element is reduced sequentially by a single thread,
//! so thread count never changes results.

use std::cell::Cell;
use std::collections::HashSet;

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

const PAR_WORK: usize = 1 << 15;

thread_local! {
    static BMM_FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Floating-point operations performed by [`matmul`] on this thread since the
/// last [`reset_bmm_flops`]. Only batched matmul counts, which in this crate
/// means the two attention products.
pub fn bmm_flops() -> u64 {
    BMM_FLOPS.with(|c| c.get())
}

pub fn reset_bmm_flops() {
    BMM_FLOPS.with(|c| c.set(0));
}

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

fn for_rows(c: &mut [f64], n: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    if work >= PAR_WORK {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        c.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_rows(c, n, m * k * n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    });
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for_rows(c, n, m * k * n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cj) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *cj += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    });
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_rows(c, n, m * k * n, |i, c_row| {
        for p in 0..k {
            let api = a[p * m + i];
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += api * bj;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn conv_geometry(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    let [n, cin, h, w] = input.dims4("conv2d")?;
    let [cout, wcin, kh, kw] = weight.dims4("conv2d")?;
    if cin != wcin {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {:?} has {cin} channels but weight {:?} expects {wcin}",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * pad,
                w + 2 * pad
            ),
        ));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Ok((
        n,
        cout,
        ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        },
    ))
}

// cols layout: [cin*kh*kw, ho*wo]
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw_out = g.ho * g.wo;
    let mut cols = vec![0.0; g.patch_len() * hw_out];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation over an NCHW input with an `[cout, cin, kh, kw]`
/// weight and zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, cout, g) = conv_geometry(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {cout} output channels", b.shape()),
            ));
        }
    }
    let in_len = g.cin * g.h * g.w;
    let hw_out = g.ho * g.wo;
    let mut out = vec![0.0; n * cout * hw_out];
    for (b_idx, out_n) in out.chunks_mut(cout * hw_out).enumerate() {
        let x = &input.data()[b_idx * in_len..(b_idx + 1) * in_len];
        if g.is_pointwise() {
            gemm_nn(weight.data(), x, out_n, cout, g.patch_len(), hw_out);
        } else {
            let cols = im2col(x, &g);
            gemm_nn(weight.data(), &cols, out_n, cout, g.patch_len(), hw_out);
        }
        if let Some(b) = bias {
            for (plane, &bv) in out_n.chunks_mut(hw_out).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cout, g.ho, g.wo], out))
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let (n, cout, g) = conv_geometry(input, weight, stride, padding)?;
    let in_len = g.cin * g.h * g.w;
    let hw_out = g.ho * g.wo;
    let plen = g.patch_len();
    let mut dx = need[0].then(|| vec![0.0; input.numel()]);
    let mut dw = need[1].then(|| vec![0.0; weight.numel()]);
    let mut db = need[2].then(|| vec![0.0; cout]);
    for b_idx in 0..n {
        let x = &input.data()[b_idx * in_len..(b_idx + 1) * in_len];
        let go = &grad_out.data()[b_idx * cout * hw_out..(b_idx + 1) * cout * hw_out];
        if let Some(dw) = dw.as_mut() {
            if g.is_pointwise() {
                gemm_nt(go, x, dw, cout, hw_out, plen);
            } else {
                let cols = im2col(x, &g);
                gemm_nt(go, &cols, dw, cout, hw_out, plen);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dx_n = &mut dx[b_idx * in_len..(b_idx + 1) * in_len];
            if g.is_pointwise() {
                gemm_tn(weight.data(), go, dx_n, plen, cout, hw_out);
            } else {
                let mut dcols = vec![0.0; plen * hw_out];
                gemm_tn(weight.data(), go, &mut dcols, plen, cout, hw_out);
                col2im_add(&dcols, &g, dx_n);
            }
        }
        if let Some(db) = db.as_mut() {
            for (acc, plane) in db.iter_mut().zip(go.chunks(hw_out)) {
                *acc += plane.iter().sum::<f64>();
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        weight: dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        bias: db.map(|d| Tensor::from_parts(vec![cout], d)),
    })
}

// ---------------------------------------------------------------------------
// Dense layers and batched products
// ---------------------------------------------------------------------------

fn linear_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    let [out_f, in_f] = match w.shape()[..] {
        [o, i] => [o, i],
        _ => {
            return Err(Error::shape(
                "linear",
                format!("weight must be [out, in], got {:?}", w.shape()),
            ))
        }
    };
    let last = *x.shape().last().unwrap_or(&1);
    if x.rank() == 0 || last != in_f {
        return Err(Error::shape(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
        ));
    }
    Ok((x.numel() / in_f, in_f, out_f))
}

/// `y = x W^T + b` over the trailing axis of `x`; `W` is `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (rows, in_f, out_f) = linear_dims(x, w)?;
    if let Some(b) = b {
        if b.shape() != [out_f] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} vs {out_f} outputs", b.shape()),
            ));
        }
    }
    let mut y = vec![0.0; rows * out_f];
    if let Some(b) = b {
        for row in y.chunks_mut(out_f) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_nt(x.data(), w.data(), &mut y, rows, in_f, out_f);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Ok(Tensor::from_parts(shape, y))
}

pub(crate) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need: [bool; 3],
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let (rows, in_f, out_f) = linear_dims(x, w)?;
    let dx = need[0].then(|| {
        let mut d = vec![0.0; rows * in_f];
        gemm_nn(dy.data(), w.data(), &mut d, rows, out_f, in_f);
        Tensor::from_parts(x.shape().to_vec(), d)
    });
    let dw = need[1].then(|| {
        let mut d = vec![0.0; out_f * in_f];
        gemm_tn(dy.data(), x.data(), &mut d, out_f, rows, in_f);
        Tensor::from_parts(w.shape().to_vec(), d)
    });
    let db = need[2].then(|| {
        let mut d = vec![0.0; out_f];
        for row in dy.data().chunks(out_f) {
            for (acc, v) in d.iter_mut().zip(row) {
                *acc += v;
            }
        }
        Tensor::from_parts(vec![out_f], d)
    });
    Ok((dx, dw, db))
}

fn matmul_dims(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<(usize, usize, usize, usize)> {
    let [ba, m, k] = a.dims3("matmul")?;
    let [bb, r, c] = b.dims3("matmul")?;
    let (kb, n) = if transpose_b { (c, r) } else { (r, c) };
    if ba != bb || k != kb {
        return Err(Error::shape(
            "matmul",
            format!(
                "{:?} x {:?}{}",
                a.shape(),
                b.shape(),
                if transpose_b { "^T" } else { "" }
            ),
        ));
    }
    Ok((ba, m, k, n))
}

/// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
/// transposed when `transpose_b` is set.
pub fn matmul(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (batch, m, k, n) = matmul_dims(a, b, transpose_b)?;
    let mut out = vec![0.0; batch * m * n];
    for (i, c) in out.chunks_mut(m * n).enumerate() {
        let a_i = &a.data()[i * m * k..(i + 1) * m * k];
        let b_i = &b.data()[i * k * n..(i + 1) * k * n];
        if transpose_b {
            gemm_nt(a_i, b_i, c, m, k, n);
        } else {
            gemm_nn(a_i, b_i, c, m, k, n);
        }
    }
    BMM_FLOPS.with(|f| f.set(f.get() + 2 * (batch * m * k * n) as u64));
    Ok(Tensor::from_parts(vec![batch, m, n], out))
}

pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    dc: &Tensor,
    transpose_b: bool,
    need: [bool; 2],
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (batch, m, k, n) = matmul_dims(a, b, transpose_b)?;
    let mut da = need[0].then(|| vec![0.0; a.numel()]);
    let mut db = need[1].then(|| vec![0.0; b.numel()]);
    for i in 0..batch {
        let a_i = &a.data()[i * m * k..(i + 1) * m * k];
        let b_i = &b.data()[i * k * n..(i + 1) * k * n];
        let dc_i = &dc.data()[i * m * n..(i + 1) * m * n];
        if let Some(da) = da.as_mut() {
            let da_i = &mut da[i * m * k..(i + 1) * m * k];
            if transpose_b {
                gemm_nn(dc_i, b_i, da_i, m, n, k);
            } else {
                gemm_nt(dc_i, b_i, da_i, m, n, k);
            }
        }
        if let Some(db) = db.as_mut() {
            let db_i = &mut db[i * k * n..(i + 1) * k * n];
            if transpose_b {
                gemm_tn(dc_i, a_i, db_i, n, m, k);
            } else {
                gemm_tn(a_i, dc_i, db_i, k, m, n);
            }
        }
    }
    Ok((
        da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        db.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    ))
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

/// `(outer, channels, inner)` view used by the channel layer norm: NCHW
/// normalizes axis 1, anything of rank 1..=3 normalizes the last axis.
fn norm_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        s if !s.is_empty() && s.len() <= 3 => {
            let c = *s.last().unwrap();
            Ok((x.numel() / c, c, 1))
        }
        s => Err(Error::shape(
            "layer_norm_channels",
            format!("unsupported rank for {s:?}"),
        )),
    }
}

pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let (outer, c, inner) = norm_layout(x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm_channels",
            format!(
                "{c} channels in {:?} but gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("layer_norm_channels", "eps must be positive"));
    }
    let xd = x.data();
    let (g, b) = (gamma.data(), beta.data());
    let mut y = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    let mut rstd = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |ch: usize| (o * c + ch) * inner + i;
            let mean = (0..c).map(|ch| xd[idx(ch)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (xd[idx(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[o * inner + i] = r;
            for ch in 0..c {
                let k = idx(ch);
                let xh = (xd[k] - mean) * r;
                xhat[k] = xh;
                y[k] = xh * g[ch] + b[ch];
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        NormCache { xhat, rstd },
    ))
}

pub(crate) fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    cache: &NormCache,
    dy: &Tensor,
    need: [bool; 3],
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let (outer, c, inner) = norm_layout(x)?;
    let g = gamma.data();
    let dyd = dy.data();
    let mut dx = need[0].then(|| vec![0.0; x.numel()]);
    let mut dg = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |ch: usize| (o * c + ch) * inner + i;
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for ch in 0..c {
                let k = idx(ch);
                let dxh = dyd[k] * g[ch];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * cache.xhat[k];
                dg[ch] += dyd[k] * cache.xhat[k];
                dbeta[ch] += dyd[k];
            }
            mean_dxh /= c as f64;
            mean_dxh_xh /= c as f64;
            if let Some(dx) = dx.as_mut() {
                let r = cache.rstd[o * inner + i];
                for ch in 0..c {
                    let k = idx(ch);
                    let dxh = dyd[k] * g[ch];
                    dx[k] = r * (dxh - mean_dxh - cache.xhat[k] * mean_dxh_xh);
                }
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        need[1].then(|| Tensor::from_parts(vec![c], dg)),
        need[2].then(|| Tensor::from_parts(vec![c], dbeta)),
    ))
}

/// Layer norm across channels: axis 1 of an NCHW map, or the trailing axis
/// of a `[L, C]` / `[N, L, C]` sequence.
pub fn layer_norm_channels(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_forward(x, gamma, beta, eps)?.0)
}

/// Softmax over the trailing axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap_or(&1);
    let mut out = x.to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap_or(&1);
    let mut dx = vec![0.0; y.numel()];
    for ((dx_row, y_row), dy_row) in dx
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(dy.data().chunks(n))
    {
        let dot: f64 = y_row.iter().zip(dy_row).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dx_row.iter_mut().zip(y_row).zip(dy_row) {
            *d = yv * (g - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * normal_cdf(v))
}

pub(crate) fn gelu_derivative(v: f64) -> f64 {
    normal_cdf(v) + v * normal_pdf(v)
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

fn pool_dims(x: &Tensor, k: usize, stride: usize) -> Result<([usize; 4], usize, usize)> {
    let [n, c, h, w] = x.dims4("avg_pool2d")?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid("avg_pool2d", "kernel and stride must be positive"));
    }
    if h < k || w < k || !(h - k).is_multiple_of(stride) || !(w - k).is_multiple_of(stride) {
        return Err(Error::shape(
            "avg_pool2d",
            format!("{h}x{w} map does not tile with kernel {k}, stride {stride}"),
        ));
    }
    Ok(([n, c, h, w], (h - k) / stride + 1, (w - k) / stride + 1))
}

/// Mean over `k x k` windows; extents must tile exactly.
pub fn avg_pool2d(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let ([n, c, h, w], ho, wo) = pool_dims(x, k, stride)?;
    let scale = 1.0 / (k * k) as f64;
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for (plane_idx, dst) in out.chunks_mut(ho * wo).enumerate() {
        let src = &xd[plane_idx * h * w..(plane_idx + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..k {
                    let row = (oy * stride + ky) * w + ox * stride;
                    acc += src[row..row + k].iter().sum::<f64>();
                }
                dst[oy * wo + ox] = acc * scale;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub(crate) fn avg_pool2d_backward(x_shape: &[usize], dy: &Tensor, k: usize, stride: usize) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let scale = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; x_shape.iter().product()];
    for (plane_idx, g) in dy.data().chunks(ho * wo).enumerate() {
        let dst = &mut dx[plane_idx * h * w..(plane_idx + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[oy * wo + ox] * scale;
                for ky in 0..k {
                    let row = (oy * stride + ky) * w + ox * stride;
                    dst[row..row + k].iter_mut().for_each(|d| *d += v);
                }
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

/// Nearest-neighbour 2x upsampling of an NCHW map.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("upsample_nearest2x")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h2, w2], out))
}

pub(crate) fn upsample_nearest2x_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![0.0; x_shape.iter().product()];
    for (g, dst) in dy.data().chunks(h2 * w2).zip(dx.chunks_mut(h * w)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += g[y * w2 + xx];
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

// ---------------------------------------------------------------------------
// Row gather / scatter
// ---------------------------------------------------------------------------

/// `(batch, rows, width)` for a `[L, D]` or `[N, L, D]` sequence.
fn row_layout(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [l, d] => Ok((1, l, d)),
        [n, l, d] => Ok((n, l, d)),
        _ => Err(Error::shape(
            op,
            format!("expected [L, D] or [N, L, D], got {:?}", x.shape()),
        )),
    }
}

/// Rejects out-of-range or repeated indices.
pub fn validate_indices(op: &'static str, indices: &[usize], len: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(indices.len());
    for &i in indices {
        if i >= len {
            return Err(Error::Index {
                op,
                index: i,
                len,
                reason: "out of range",
            });
        }
        if !seen.insert(i) {
            return Err(Error::Index {
                op,
                index: i,
                len,
                reason: "duplicate",
            });
        }
    }
    Ok(())
}

/// Selects rows `indices` along the sequence axis (axis -2).
pub fn gather_rows(seq: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (n, l, d) = row_layout(seq, "gather_rows")?;
    if indices.is_empty() {
        return Err(Error::invalid("gather_rows", "empty index list"));
    }
    validate_indices("gather_rows", indices, l)?;
    let src = seq.data();
    let mut out = Vec::with_capacity(n * indices.len() * d);
    for b in 0..n {
        for &i in indices {
            let start = (b * l + i) * d;
            out.extend_from_slice(&src[start..start + d]);
        }
    }
    let mut shape = seq.shape().to_vec();
    let rank = shape.len();
    shape[rank - 2] = indices.len();
    Ok(Tensor::from_parts(shape, out))
}

/// Writes `values` into rows `indices` of `base`; other rows are untouched.
pub fn scatter_rows(base: &Tensor, indices: &[usize], values: &Tensor) -> Result<Tensor> {
    let (n, l, d) = row_layout(base, "scatter_rows")?;
    let (vn, vl, vd) = row_layout(values, "scatter_rows")?;
    if vn != n || vd != d || vl != indices.len() || values.rank() != base.rank() {
        return Err(Error::shape(
            "scatter_rows",
            format!(
                "base {:?}, values {:?}, {} indices",
                base.shape(),
                values.shape(),
                indices.len()
            ),
        ));
    }
    validate_indices("scatter_rows", indices, l)?;
    let mut out = base.to_vec();
    let src = values.data();
    for b in 0..n {
        for (r, &i) in indices.iter().enumerate() {
            let dst = (b * l + i) * d;
            let s = (b * vl + r) * d;
            out[dst..dst + d].copy_from_slice(&src[s..s + d]);
        }
    }
    Ok(Tensor::from_parts(base.shape().to_vec(), out))
}

pub(crate) fn zero_rows(x: &Tensor, indices: &[usize]) -> Tensor {
    let (n, l, d) = row_layout(x, "scatter_rows").expect("validated on forward");
    let mut out = x.to_vec();
    for b in 0..n {
        for &i in indices {
            let dst = (b * l + i) * d;
            out[dst..dst + d].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Shape manipulation and broadcasting
// ---------------------------------------------------------------------------

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    if axes.len() != rank || sorted.iter().enumerate().any(|(i, &a)| i != a) {
        return Err(Error::invalid(
            "permute",
            format!("{axes:?} is not a permutation of {rank} axes"),
        ));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.numel() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Slice `[start, start + len)` of `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::invalid(
            "narrow",
            format!("[{start}, {}) of axis {axis} in {:?}", start + len, x.shape()),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let extent = x.shape()[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn narrow_backward(x_shape: &[usize], axis: usize, start: usize, dy: &Tensor) -> Tensor {
    let outer: usize = x_shape[..axis].iter().product();
    let inner: usize = x_shape[axis + 1..].iter().product();
    let extent = x_shape[axis];
    let len = dy.shape()[axis];
    let mut dx = vec![0.0; x_shape.iter().product()];
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        let src = &dy.data()[o * len * inner..(o + 1) * len * inner];
        dx[base..base + len * inner].copy_from_slice(src);
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

/// `a + b` where `b`'s shape is a trailing suffix of `a`'s (including equal).
pub fn add_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !is_suffix(a.shape(), b.shape()) {
        return Err(Error::shape(
            "add",
            format!("{:?} cannot broadcast onto {:?}", b.shape(), a.shape()),
        ));
    }
    let bd = b.data();
    let m = bd.len();
    let out = a
        .data()
        .chunks(m)
        .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// Sums `g` over its leading axes down to `suffix`.
pub(crate) fn reduce_to_suffix(g: &Tensor, suffix: &[usize]) -> Tensor {
    if g.shape() == suffix {
        return g.clone();
    }
    let m: usize = suffix.iter().product();
    let mut out = vec![0.0; m];
    for chunk in g.data().chunks(m) {
        for (acc, v) in out.iter_mut().zip(chunk) {
            *acc += v;
        }
    }
    Tensor::from_parts(suffix.to_vec(), out)
}

/// Repeats `x` over new leading axes `lead`.
pub fn expand_leading(x: &Tensor, lead: &[usize]) -> Result<Tensor> {
    let reps: usize = lead.iter().product();
    if reps == 0 {
        return Err(Error::invalid("expand", "zero-sized leading axis"));
    }
    let mut shape = lead.to_vec();
    shape.extend_from_slice(x.shape());
    let mut out = Vec::with_capacity(reps * x.numel());
    for _ in 0..reps {
        out.extend_from_slice(x.data());
    }
    Ok(Tensor::from_parts(shape, out))
}
