//! Forward and backward kernels for the closed operation set.
//!
//! Every function here is pure: it reads its inputs and returns fresh
//! tensors. The tape in [`crate::autograd`] records compositions of these and
//! calls the matching `*_backward` kernel during the reverse sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Stride, per-axis padding and group count of a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: (usize, usize), groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride-1 "same" padding for an odd `kh x kw` kernel.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self::new(1, ((kh - 1) / 2, (kw - 1) / 2), 1)
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < kh || pw < kw || self.stride == 0 {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// A convolution's learnable state together with its geometry.
#[derive(Debug, Clone)]
pub struct ConvParams {
    /// `(c_out, c_in / groups, k_h, k_w)`.
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
    pub geom: ConvGeometry,
}

impl ConvParams {
    pub fn c_out(&self) -> usize {
        self.weight.n()
    }
    pub fn c_in(&self) -> usize {
        self.weight.c() * self.geom.groups
    }
}

fn check_conv(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, g: &ConvGeometry) -> Result<(usize, usize)> {
    let groups = g.groups;
    if groups == 0 || g.stride == 0 {
        return Err(Error::invalid("conv2d", "groups and stride must be positive"));
    }
    let c_out = w.n();
    let c_in = x.c();
    if c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("groups {groups} must divide c_in {c_in} and c_out {c_out}"),
        ));
    }
    if w.c() * groups != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, weight expects {}", c_in, w.c() * groups),
        ));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape("conv2d", format!("bias length {} != c_out {}", b.len(), c_out)));
        }
    }
    g.output_hw(x.h(), x.w(), w.h(), w.w()).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("kernel {}x{} does not fit {}x{} with padding {:?}", w.h(), w.w(), x.h(), x.w(), g.padding),
        )
    })
}

/// Valid output index range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn tap_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // in = out*stride + k - pad must satisfy 0 <= in < in_len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    conv2d_raw(x, &p.weight, p.bias.as_deref(), &p.geom)
}

pub fn conv2d_raw(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, g: &ConvGeometry) -> Result<Tensor> {
    let (ho, wo) = check_conv(x, w, bias, g)?;
    let [n, c_in, h, wi] = x.shape();
    let [c_out, cig, kh, kw] = w.shape();
    let cog = c_out / g.groups;
    let (s, (ph, pw)) = (g.stride, g.padding);
    let mut out = vec![0.0; n * c_out * ho * wo];
    let xd = x.data();
    let wd = w.data();
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(idx, plane)| {
        let (b, oc) = (idx / c_out, idx % c_out);
        let grp = oc / cog;
        if let Some(bv) = bias {
            plane.fill(bv[oc]);
        }
        for icl in 0..cig {
            let ic = grp * cig + icl;
            let xin = &xd[(b * c_in + ic) * h * wi..][..h * wi];
            for ky in 0..kh {
                let (oy0, oy1) = tap_range(ky, ph, s, h, ho);
                for kx in 0..kw {
                    let wv = wd[((oc * cig + icl) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = tap_range(kx, pw, s, wi, wo);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - ph;
                        let row = &xin[iy * wi..];
                        let orow = &mut plane[oy * wo..];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * row[ox * s + kx - pw];
                        }
                    }
                }
            }
        }
    });
    Tensor::new([n, c_out, ho, wo], out)?.ensure_finite("conv2d")
}

/// Gradients `(dx, dw, dbias)` of a convolution given the upstream gradient.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    g: &ConvGeometry,
    gy: &Tensor,
) -> (Tensor, Tensor, Option<Vec<f64>>) {
    let [n, c_in, h, wi] = x.shape();
    let [c_out, cig, kh, kw] = w.shape();
    let [_, _, ho, wo] = gy.shape();
    let cog = c_out / g.groups;
    let (s, (ph, pw)) = (g.stride, g.padding);
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());

    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(h * wi).enumerate().for_each(|(idx, plane)| {
        let (b, ic) = (idx / c_in, idx % c_in);
        let grp = ic / cig;
        let icl = ic % cig;
        for oc in grp * cog..(grp + 1) * cog {
            let gplane = &gd[(b * c_out + oc) * ho * wo..][..ho * wo];
            for ky in 0..kh {
                let (oy0, oy1) = tap_range(ky, ph, s, h, ho);
                for kx in 0..kw {
                    let wv = wd[((oc * cig + icl) * kh + ky) * kw + kx];
                    let (ox0, ox1) = tap_range(kx, pw, s, wi, wo);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - ph;
                        for ox in ox0..ox1 {
                            plane[iy * wi + ox * s + kx - pw] += wv * gplane[oy * wo + ox];
                        }
                    }
                }
            }
        }
    });

    let mut dw = vec![0.0; w.len()];
    dw.par_chunks_mut(cig * kh * kw).enumerate().for_each(|(oc, wrow)| {
        let grp = oc / cog;
        for b in 0..n {
            let gplane = &gd[(b * c_out + oc) * ho * wo..][..ho * wo];
            for icl in 0..cig {
                let ic = grp * cig + icl;
                let xin = &xd[(b * c_in + ic) * h * wi..][..h * wi];
                for ky in 0..kh {
                    let (oy0, oy1) = tap_range(ky, ph, s, h, ho);
                    for kx in 0..kw {
                        let (ox0, ox1) = tap_range(kx, pw, s, wi, wo);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - ph;
                            for ox in ox0..ox1 {
                                acc += gplane[oy * wo + ox] * xin[iy * wi + ox * s + kx - pw];
                            }
                        }
                        wrow[(icl * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });

    let db = has_bias.then(|| {
        (0..c_out)
            .map(|oc| (0..n).map(|b| gd[(b * c_out + oc) * ho * wo..][..ho * wo].iter().sum::<f64>()).sum())
            .collect()
    });
    (
        Tensor::new(x.shape(), dx).expect("dx shape"),
        Tensor::new(w.shape(), dw).expect("dw shape"),
        db,
    )
}

/// Saved statistics of a group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupNormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

fn check_gn(x: &Tensor, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::invalid("group_norm", format!("eps must be positive, got {eps}")));
    }
    if groups == 0 || x.c() % groups != 0 {
        return Err(Error::invalid(
            "group_norm",
            format!("{} channels not divisible into {} groups", x.c(), groups),
        ));
    }
    if gamma.len() != x.c() || beta.len() != x.c() {
        return Err(Error::shape("group_norm", "affine vectors must have one entry per channel"));
    }
    Ok(())
}

/// `lambda * (x - mu) / sqrt(var + eps) + eta` with statistics per (sample, group).
pub fn group_norm(x: &Tensor, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    group_norm_with_stats(x, groups, gamma, beta, eps).map(|(t, _)| t)
}

pub fn group_norm_with_stats(
    x: &Tensor,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor, GroupNormStats)> {
    check_gn(x, groups, gamma, beta, eps)?;
    let [n, c, _, _] = x.shape();
    let cpg = c / groups;
    let p = x.plane();
    let span = cpg * p;
    let mut out = vec![0.0; x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for (gi, chunk) in x.data().chunks(span).enumerate() {
        let m = chunk.iter().sum::<f64>() / span as f64;
        let var = chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / span as f64;
        let r = 1.0 / (var + eps).sqrt();
        let g0 = (gi % groups) * cpg;
        for (j, &v) in chunk.iter().enumerate() {
            let ch = g0 + j / p;
            out[gi * span + j] = gamma[ch] * (v - m) * r + beta[ch];
        }
        mean.push(m);
        rstd.push(r);
    }
    Ok((Tensor::new([n, c, x.h(), x.w()], out)?.ensure_finite("group_norm")?, GroupNormStats { mean, rstd }))
}

/// Gradients `(dx, dgamma, dbeta)` of group norm.
pub fn group_norm_backward(
    x: &Tensor,
    groups: usize,
    gamma: &[f64],
    stats: &GroupNormStats,
    gy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let c = x.c();
    let cpg = c / groups;
    let p = x.plane();
    let span = cpg * p;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (gi, (xc, gc)) in x.data().chunks(span).zip(gy.data().chunks(span)).enumerate() {
        let (m, r) = (stats.mean[gi], stats.rstd[gi]);
        let g0 = (gi % groups) * cpg;
        // dxhat = gy * gamma; dx = r * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..span {
            let ch = g0 + j / p;
            let xhat = (xc[j] - m) * r;
            let d = gc[j] * gamma[ch];
            sum_d += d;
            sum_dx += d * xhat;
            dgamma[ch] += gc[j] * xhat;
            dbeta[ch] += gc[j];
        }
        let (md, mdx) = (sum_d / span as f64, sum_dx / span as f64);
        for j in 0..span {
            let ch = g0 + j / p;
            let xhat = (xc[j] - m) * r;
            dx[gi * span + j] = r * (gc[j] * gamma[ch] - md - xhat * mdx);
        }
    }
    (Tensor::new(x.shape(), dx).expect("dx shape"), dgamma, dbeta)
}

pub fn adaptive_avg_pool_1x1(x: &Tensor) -> Result<Tensor> {
    if x.h() == 0 || x.w() == 0 {
        return Err(Error::shape("adaptive_avg_pool_1x1", "empty spatial dims"));
    }
    let p = x.plane() as f64;
    let data = x.data().chunks(x.plane()).map(|c| c.iter().sum::<f64>() / p).collect();
    Tensor::new([x.n(), x.c(), 1, 1], data)
}

pub fn adaptive_avg_pool_1x1_backward(input_shape: Shape, gy: &Tensor) -> Tensor {
    let p = input_shape[2] * input_shape[3];
    let inv = 1.0 / p as f64;
    let mut dx = Vec::with_capacity(input_shape.iter().product());
    for &g in gy.data() {
        dx.extend(std::iter::repeat_n(g * inv, p));
    }
    Tensor::new(input_shape, dx).expect("pool grad shape")
}

/// Max pooling; also returns the flat input index chosen for each output.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, padding: usize) -> Result<(Tensor, Vec<usize>)> {
    if k == 0 || stride == 0 {
        return Err(Error::invalid("max_pool2d", "kernel and stride must be positive"));
    }
    if padding * 2 > k {
        return Err(Error::invalid("max_pool2d", "padding may not exceed half the kernel"));
    }
    let geom = ConvGeometry::new(stride, (padding, padding), 1);
    let (ho, wo) = geom
        .output_hw(x.h(), x.w(), k, k)
        .ok_or_else(|| Error::shape("max_pool2d", "window larger than padded input"))?;
    let [n, c, h, w] = x.shape();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new([n, c, ho, wo], out)?, arg))
}

pub fn max_pool2d_backward(input_shape: Shape, argmax: &[usize], gy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(gy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Nearest-neighbour resize; source index is `floor(dst * in / out)`.
pub fn resize_nearest(x: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    if ho == 0 || wo == 0 {
        return Err(Error::shape("resize_nearest", "empty target size"));
    }
    let [n, c, h, w] = x.shape();
    let ys: Vec<usize> = (0..ho).map(|y| y * h / ho).collect();
    let xs: Vec<usize> = (0..wo).map(|v| v * w / wo).collect();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for &sy in &ys {
            for &sx in &xs {
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

pub fn resize_nearest_backward(input_shape: Shape, gy: &Tensor) -> Tensor {
    let [_, _, h, w] = input_shape;
    let [_, _, ho, wo] = gy.shape();
    let mut dx = Tensor::zeros(input_shape);
    for (pi, gplane) in gy.data().chunks(ho * wo).enumerate() {
        let base = pi * h * w;
        for y in 0..ho {
            let sy = y * h / ho;
            for v in 0..wo {
                dx.data_mut()[base + sy * w + v * w / wo] += gplane[y * wo + v];
            }
        }
    }
    dx
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    resize_nearest(x, 2 * x.h(), 2 * x.w()).expect("non-empty target")
}

/// Channels `[start, start + len)`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if start + len > x.c() || len == 0 {
        return Err(Error::shape(
            "split_channels",
            format!("slice {}..{} of {} channels", start, start + len, x.c()),
        ));
    }
    let p = x.plane();
    let mut out = Vec::with_capacity(x.n() * len * p);
    for b in 0..x.n() {
        let from = (b * x.c() + start) * p;
        out.extend_from_slice(&x.data()[from..from + len * p]);
    }
    Tensor::new([x.n(), len, x.h(), x.w()], out)
}

pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if sizes.iter().sum::<usize>() != x.c() {
        return Err(Error::shape(
            "split_channels",
            format!("sizes {:?} do not sum to {} channels", sizes, x.c()),
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let t = slice_channels(x, start, s);
            start += s;
            t
        })
        .collect()
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "nothing to concatenate"))?;
    let [n, _, h, w] = first.shape();
    if parts.iter().any(|t| t.n() != n || t.h() != h || t.w() != w) {
        return Err(Error::shape("concat_channels", "parts differ in batch or spatial size"));
    }
    let c: usize = parts.iter().map(|t| t.c()).sum();
    let p = h * w;
    let mut out = Vec::with_capacity(n * c * p);
    for b in 0..n {
        for t in parts {
            let span = t.c() * p;
            out.extend_from_slice(&t.data()[b * span..(b + 1) * span]);
        }
    }
    Tensor::new([n, c, h, w], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Silu,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Silu => x.map(|v| v * sigmoid(v)),
    }
}

pub fn activation_backward(x: &Tensor, kind: Activation, gy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            match kind {
                Activation::Sigmoid => g * s * (1.0 - s),
                Activation::Silu => g * (s + v * s * (1.0 - s)),
            }
        })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryOp {
    Add,
    Mul,
}

/// True when `b` is a per-channel vector broadcastable over `a`'s spatial dims.
fn is_channel_broadcast(a: &Tensor, b: &Tensor) -> bool {
    b.h() == 1 && b.w() == 1 && b.c() == a.c() && (b.n() == a.n() || b.n() == 1) && a.plane() > 1
}

/// Elementwise `a op b`. `b` may also be `(n|1, c, 1, 1)`, broadcast over space.
pub fn elementwise(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    let f = |x: f64, y: f64| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Mul => x * y,
    };
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data)?.ensure_finite("elementwise");
    }
    if !is_channel_broadcast(a, b) {
        return Err(Error::shape("elementwise", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let p = a.plane();
    let c = a.c();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let nc = i / p;
            let bi = if b.n() == 1 { nc % c } else { nc };
            f(x, b.data()[bi])
        })
        .collect();
    Tensor::new(a.shape(), data)?.ensure_finite("elementwise")
}

/// Gradients with respect to both operands of [`elementwise`].
pub fn elementwise_backward(a: &Tensor, b: &Tensor, op: BinaryOp, gy: &Tensor) -> (Tensor, Tensor) {
    let p = a.plane();
    let c = a.c();
    let broadcast = a.shape() != b.shape();
    let bidx = |i: usize| {
        if !broadcast {
            i
        } else if b.n() == 1 {
            (i / p) % c
        } else {
            i / p
        }
    };
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    for (i, &g) in gy.data().iter().enumerate() {
        let j = bidx(i);
        match op {
            BinaryOp::Add => {
                da[i] = g;
                db[j] += g;
            }
            BinaryOp::Mul => {
                da[i] = g * b.data()[j];
                db[j] += g * a.data()[i];
            }
        }
    }
    (
        Tensor::new(a.shape(), da).expect("da"),
        Tensor::new(b.shape(), db).expect("db"),
    )
}

/// `scale * x + shift`.
pub fn affine(x: &Tensor, scale: f64, shift: f64) -> Tensor {
    x.map(|v| scale * v + shift)
}

/// Softmax over `axis` (0..4) of an NCHW tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis > 3 {
        return Err(Error::invalid("softmax", format!("axis {axis} out of range")));
    }
    let shape = x.shape();
    let stride: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * len * stride + inner;
            let m = (0..len).map(|k| out[base + k * stride]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (out[base + k * stride] - m).exp();
                out[base + k * stride] = e;
                z += e;
            }
            for k in 0..len {
                out[base + k * stride] /= z;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Softmax across `blocks` equal channel blocks: for every (n, c, y, x) the
/// values at channel `c + b * (C / blocks)`, `b = 0..blocks`, are normalized.
pub fn softmax_blocks(x: &Tensor, blocks: usize) -> Result<Tensor> {
    if blocks == 0 || x.c() % blocks != 0 {
        return Err(Error::invalid("softmax_blocks", format!("{} channels into {} blocks", x.c(), blocks)));
    }
    let [n, c, h, w] = x.shape();
    let cb = c / blocks;
    let reshaped = x.clone().reshape([n, blocks, cb, h * w])?;
    softmax(&reshaped, 1)?.reshape([n, c, h, w])
}

pub fn softmax_blocks_backward(y: &Tensor, blocks: usize, gy: &Tensor) -> Tensor {
    let [n, c, h, w] = y.shape();
    let cb = c / blocks;
    let p = h * w;
    let mut dx = vec![0.0; y.len()];
    for b in 0..n {
        for ch in 0..cb {
            for s in 0..p {
                let at = |k: usize| ((b * c + k * cb + ch) * p) + s;
                let dot: f64 = (0..blocks).map(|k| y.data()[at(k)] * gy.data()[at(k)]).sum();
                for k in 0..blocks {
                    dx[at(k)] = y.data()[at(k)] * (gy.data()[at(k)] - dot);
                }
            }
        }
    }
    Tensor::new(y.shape(), dx).expect("same shape")
}
