//! Layer primitives with explicit backward passes.
//!
//! Every differentiable op here comes in a forward/backward pair; the forward
//! returns whatever the backward needs (argmax indices, normalized values,
//! dropout masks) so a recorded pass can be replayed in reverse without a
//! dynamic graph. Convolution is cross-correlation plus bias, the usual
//! deep-learning convention.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Border handling for `conv3d`.
///
/// `Same` keeps output extents at `ceil(in/stride)` by zero-padding, with the
/// surplus pad cell (odd totals) on the high side. `Valid` uses no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(Error::InvalidArgument(format!(
                "padding must be \"same\" or \"valid\", got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        })
    }
}

/// Output extent and low-side pad for one spatial axis.
fn conv_geometry(
    padding: Padding,
    extent: usize,
    k: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let span = (out - 1) * stride + k;
            Ok((out, span.saturating_sub(extent) / 2))
        }
        Padding::Valid => {
            if k > extent {
                return Err(Error::ShapeMismatch(format!(
                    "valid conv needs kernel extent {k} <= input extent {extent}"
                )));
            }
            Ok(((extent - k) / stride + 1, 0))
        }
    }
}

fn dims5<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d, e] => Ok((a, b, c, d, e)),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} must have rank 5, got shape {:?}",
            t.shape()
        ))),
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} must have rank 2, got shape {:?}",
            t.shape()
        ))),
    }
}

fn check_stride(stride: usize, what: &str) -> Result<()> {
    if stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "{what} stride must be >= 1"
        )));
    }
    Ok(())
}

/// 3-D cross-correlation: input `[N,D,H,W,Cin]`, kernel `[KD,KH,KW,Cin,Cout]`,
/// bias `[Cout]` → `[N,D',H',W',Cout]`.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (n, d, h, w, cin) = dims5(input, "conv3d input")?;
    let (kd, kh, kw, kcin, cout) = dims5(kernel, "conv3d kernel")?;
    check_stride(stride, "conv3d")?;
    if kcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv3d kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::ShapeMismatch(format!(
            "conv3d bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    let (od, pd) = conv_geometry(padding, d, kd, stride)?;
    let (oh, ph) = conv_geometry(padding, h, kh, stride)?;
    let (ow, pw) = conv_geometry(padding, w, kw, stride)?;

    let xs = input.data();
    let ks = kernel.data();
    let bs = bias.data();
    let in_sd = h * w * cin;
    let in_sh = w * cin;
    let mut out = vec![T::zero(); n * od * oh * ow * cout];
    let mut acc = vec![T::zero(); cout];
    for bn in 0..n {
        let x_n = bn * d * in_sd;
        for odi in 0..od {
            let d0 = (odi * stride) as isize - pd as isize;
            for ohi in 0..oh {
                let h0 = (ohi * stride) as isize - ph as isize;
                for owi in 0..ow {
                    let w0 = (owi * stride) as isize - pw as isize;
                    acc.copy_from_slice(bs);
                    for kdi in 0..kd {
                        let id = d0 + kdi as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for khi in 0..kh {
                            let ih = h0 + khi as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kwi in 0..kw {
                                let iw = w0 + kwi as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let xbase = x_n
                                    + id as usize * in_sd
                                    + ih as usize * in_sh
                                    + iw as usize * cin;
                                let kbase = (((kdi * kh + khi) * kw + kwi) * cin) * cout;
                                let xrow = &xs[xbase..xbase + cin];
                                for (ci, &xv) in xrow.iter().enumerate() {
                                    let krow = &ks[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    for (a, &kv) in acc.iter_mut().zip(krow) {
                                        *a += xv * kv;
                                    }
                                }
                            }
                        }
                    }
                    let obase = (((bn * od + odi) * oh + ohi) * ow + owi) * cout;
                    out[obase..obase + cout].copy_from_slice(&acc);
                }
            }
        }
    }
    Tensor::new(&[n, od, oh, ow, cout], out)
}

/// Kernel and bias gradients from one conv backward pass.
#[derive(Debug, Clone)]
pub struct Conv3dGrads<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of a scalar loss through `conv3d`: returns the input gradient
/// plus kernel/bias gradients. `grad_out` must have the forward output shape.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Conv3dGrads<T>)> {
    let (n, d, h, w, cin) = dims5(input, "conv3d input")?;
    let (kd, kh, kw, _, cout) = dims5(kernel, "conv3d kernel")?;
    check_stride(stride, "conv3d")?;
    let (od, pd) = conv_geometry(padding, d, kd, stride)?;
    let (oh, ph) = conv_geometry(padding, h, kh, stride)?;
    let (ow, pw) = conv_geometry(padding, w, kw, stride)?;
    if grad_out.shape() != [n, od, oh, ow, cout] {
        return Err(Error::ShapeMismatch(format!(
            "conv3d grad shape {:?} does not match output shape {:?}",
            grad_out.shape(),
            [n, od, oh, ow, cout]
        )));
    }

    let xs = input.data();
    let ks = kernel.data();
    let gos = grad_out.data();
    let in_sd = h * w * cin;
    let in_sh = w * cin;
    let mut gx = vec![T::zero(); xs.len()];
    let mut gk = vec![T::zero(); ks.len()];
    let mut gb = vec![T::zero(); cout];
    for bn in 0..n {
        let x_n = bn * d * in_sd;
        for odi in 0..od {
            let d0 = (odi * stride) as isize - pd as isize;
            for ohi in 0..oh {
                let h0 = (ohi * stride) as isize - ph as isize;
                for owi in 0..ow {
                    let w0 = (owi * stride) as isize - pw as isize;
                    let obase = (((bn * od + odi) * oh + ohi) * ow + owi) * cout;
                    let gorow = &gos[obase..obase + cout];
                    for (b, &g) in gb.iter_mut().zip(gorow) {
                        *b += g;
                    }
                    for kdi in 0..kd {
                        let id = d0 + kdi as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for khi in 0..kh {
                            let ih = h0 + khi as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kwi in 0..kw {
                                let iw = w0 + kwi as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let xbase = x_n
                                    + id as usize * in_sd
                                    + ih as usize * in_sh
                                    + iw as usize * cin;
                                let kbase = (((kdi * kh + khi) * kw + kwi) * cin) * cout;
                                for ci in 0..cin {
                                    let kr = kbase + ci * cout;
                                    let krow = &ks[kr..kr + cout];
                                    let gkrow = &mut gk[kr..kr + cout];
                                    let xv = xs[xbase + ci];
                                    let mut acc = T::zero();
                                    for ((&g, &kv), gkv) in
                                        gorow.iter().zip(krow).zip(gkrow.iter_mut())
                                    {
                                        acc += g * kv;
                                        *gkv += xv * g;
                                    }
                                    gx[xbase + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Conv3dGrads {
            kernel: Tensor::new(kernel.shape(), gk)?,
            bias: Tensor::new(&[cout], gb)?,
        },
    ))
}

/// Winning input positions from a pooling pass, for backward routing.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Flat input index of the max for each output element, in output order.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Channel-wise max pooling over cubic windows. Output extents are
/// `ceil(in/stride)`; windows are clipped at the borders and clipped cells
/// take no part in the max. Ties go to the lowest flat index.
pub fn maxpool3d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, d, h, w, c) = dims5(input, "maxpool3d input")?;
    check_stride(stride, "maxpool3d")?;
    if window == 0 {
        return Err(Error::InvalidArgument(
            "maxpool3d window must be >= 1".into(),
        ));
    }
    let od = d.div_ceil(stride);
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);

    let xs = input.data();
    let in_sd = h * w * c;
    let in_sh = w * c;
    let mut out = vec![T::zero(); n * od * oh * ow * c];
    let mut argmax = vec![0usize; out.len()];
    let mut best = vec![T::neg_infinity(); c];
    let mut bidx = vec![0usize; c];
    for bn in 0..n {
        let x_n = bn * d * in_sd;
        for odi in 0..od {
            let d0 = odi * stride;
            let d1 = (d0 + window).min(d);
            for ohi in 0..oh {
                let h0 = ohi * stride;
                let h1 = (h0 + window).min(h);
                for owi in 0..ow {
                    let w0 = owi * stride;
                    let w1 = (w0 + window).min(w);
                    for v in best.iter_mut() {
                        *v = T::neg_infinity();
                    }
                    for id in d0..d1 {
                        for ih in h0..h1 {
                            for iw in w0..w1 {
                                let base = x_n + id * in_sd + ih * in_sh + iw * c;
                                let xrow = &xs[base..base + c];
                                for (ci, &xv) in xrow.iter().enumerate() {
                                    if xv > best[ci] {
                                        best[ci] = xv;
                                        bidx[ci] = base + ci;
                                    }
                                }
                            }
                        }
                    }
                    let obase = (((bn * od + odi) * oh + ohi) * ow + owi) * c;
                    out[obase..obase + c].copy_from_slice(&best);
                    argmax[obase..obase + c].copy_from_slice(&bidx);
                }
            }
        }
    }
    Ok((
        Tensor::new(&[n, od, oh, ow, c], out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each output gradient back to the input voxel that won its window.
pub fn maxpool3d_backward<T: Scalar>(
    indices: &PoolIndices,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.numel() != indices.argmax.len() {
        return Err(Error::ShapeMismatch(format!(
            "maxpool3d grad has {} elements, pooling produced {}",
            grad_out.numel(),
            indices.argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(&indices.input_shape);
    let data = gx.data_mut();
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.data()) {
        data[idx] += g;
    }
    Ok(gx)
}

/// Elementwise `x` for `x >= 0`, `alpha * x` otherwise.
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::from_f64(alpha);
    x.map(|v| if v >= T::zero() { v } else { a * v })
}

/// Scales the gradient by 1 on the identity branch, `alpha` on the leak.
pub fn leaky_relu_backward<T: Scalar>(
    x: &Tensor<T>,
    alpha: f64,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch(
            "leaky_relu grad shape differs from input".into(),
        ));
    }
    let a = T::from_f64(alpha);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v >= T::zero() { g } else { a * g })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Affine map `x W + b` with `x [N,F]`, `W [F,G]`, `b [G]`.
pub fn dense<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = dims2(x, "dense input")?;
    let (wf, g) = dims2(weight, "dense weight")?;
    if wf != f {
        return Err(Error::ShapeMismatch(format!(
            "dense input has {f} features, weight expects {wf}"
        )));
    }
    if bias.shape() != [g] {
        return Err(Error::ShapeMismatch(format!(
            "dense bias shape {:?} does not match {g} outputs",
            bias.shape()
        )));
    }
    let xs = x.data();
    let ws = weight.data();
    let mut out = vec![T::zero(); n * g];
    for ni in 0..n {
        let orow = &mut out[ni * g..(ni + 1) * g];
        orow.copy_from_slice(bias.data());
        let xrow = &xs[ni * f..(ni + 1) * f];
        for (fi, &xv) in xrow.iter().enumerate() {
            let wrow = &ws[fi * g..(fi + 1) * g];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    Tensor::new(&[n, g], out)
}

/// Weight and bias gradients from one dense backward pass.
#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, DenseGrads<T>)> {
    let (n, f) = dims2(x, "dense input")?;
    let (_, g) = dims2(weight, "dense weight")?;
    if grad_out.shape() != [n, g] {
        return Err(Error::ShapeMismatch(format!(
            "dense grad shape {:?} does not match output shape {:?}",
            grad_out.shape(),
            [n, g]
        )));
    }
    let xs = x.data();
    let ws = weight.data();
    let gos = grad_out.data();
    let mut gx = vec![T::zero(); n * f];
    let mut gw = vec![T::zero(); f * g];
    let mut gb = vec![T::zero(); g];
    for ni in 0..n {
        let gorow = &gos[ni * g..(ni + 1) * g];
        for (b, &gv) in gb.iter_mut().zip(gorow) {
            *b += gv;
        }
        let xrow = &xs[ni * f..(ni + 1) * f];
        let gxrow = &mut gx[ni * f..(ni + 1) * f];
        for fi in 0..f {
            let wrow = &ws[fi * g..(fi + 1) * g];
            let gwrow = &mut gw[fi * g..(fi + 1) * g];
            let xv = xrow[fi];
            let mut acc = T::zero();
            for ((&gv, &wv), gwv) in gorow.iter().zip(wrow).zip(gwrow.iter_mut()) {
                acc += gv * wv;
                *gwv += xv * gv;
            }
            gxrow[fi] = acc;
        }
    }
    Ok((
        Tensor::new(&[n, f], gx)?,
        DenseGrads {
            weight: Tensor::new(weight.shape(), gw)?,
            bias: Tensor::new(&[g], gb)?,
        },
    ))
}

/// Running statistics carried by a batch-normalization layer between calls.
///
/// `running_var` stays nonnegative: it is a convex blend of nonnegative batch
/// variances. The same biased (1/m) variance is used for normalization and
/// for the running blend.
#[derive(Debug, Clone)]
pub struct NormState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> NormState<T> {
    pub fn new(channels: usize) -> Self {
        NormState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn cast<U: Scalar>(&self) -> NormState<U> {
        NormState {
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

/// Saved forward values a batch-norm backward pass needs.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    rows: usize,
}

/// Per-channel normalization over everything but the channel axis.
///
/// Training mode normalizes by batch statistics and folds them into the
/// running state (`r = momentum * r + (1 - momentum) * batch`); inference
/// normalizes by the running state and returns no cache. `x` is `[..., C]`
/// with rank >= 2.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut NormState<T>,
    training: bool,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let c = check_norm_shapes(x, gamma, beta)?;
    if state.running_mean.shape() != [c] || state.running_var.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "norm state tracks {} channels, input has {c}",
            state.running_mean.numel()
        )));
    }
    let xs = x.data();
    let rows = xs.len() / c;
    let eps = T::from_f64(state.eps);

    if !training {
        let inv_std: Vec<T> = state
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(c) {
            for (ci, &v) in row.iter().enumerate() {
                let xhat = (v - state.running_mean.data()[ci]) * inv_std[ci];
                out.push(gamma.data()[ci] * xhat + beta.data()[ci]);
            }
        }
        return Ok((Tensor::new(x.shape(), out)?, None));
    }

    let m = T::from_f64(rows as f64);
    let mut mean = vec![T::zero(); c];
    for row in xs.chunks_exact(c) {
        for (mc, &v) in mean.iter_mut().zip(row) {
            *mc += v;
        }
    }
    for mc in mean.iter_mut() {
        *mc /= m;
    }
    let mut var = vec![T::zero(); c];
    for row in xs.chunks_exact(c) {
        for (ci, &v) in row.iter().enumerate() {
            let dv = v - mean[ci];
            var[ci] += dv * dv;
        }
    }
    for vc in var.iter_mut() {
        *vc /= m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = Vec::with_capacity(xs.len());
    let mut out = Vec::with_capacity(xs.len());
    for row in xs.chunks_exact(c) {
        for (ci, &v) in row.iter().enumerate() {
            let xh = (v - mean[ci]) * inv_std[ci];
            xhat.push(xh);
            out.push(gamma.data()[ci] * xh + beta.data()[ci]);
        }
    }

    let mom = T::from_f64(state.momentum);
    let blend = T::one() - mom;
    for ci in 0..c {
        let rm = &mut state.running_mean.data_mut()[ci];
        *rm = mom * *rm + blend * mean[ci];
        let rv = &mut state.running_var.data_mut()[ci];
        *rv = mom * *rv + blend * var[ci];
    }

    Ok((
        Tensor::new(x.shape(), out)?,
        Some(BatchNormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
            rows,
        }),
    ))
}

pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.numel();
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::ShapeMismatch(
            "batch_norm grad shape differs from forward output".into(),
        ));
    }
    let gos = grad_out.data();
    let xh = cache.xhat.data();
    let m = T::from_f64(cache.rows as f64);

    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (gorow, xrow) in gos.chunks_exact(c).zip(xh.chunks_exact(c)) {
        for ci in 0..c {
            sum_g[ci] += gorow[ci];
            sum_gx[ci] += gorow[ci] * xrow[ci];
        }
    }

    let mut gx = Vec::with_capacity(gos.len());
    for (gorow, xrow) in gos.chunks_exact(c).zip(xh.chunks_exact(c)) {
        for ci in 0..c {
            let scale = gamma.data()[ci] * cache.inv_std[ci] / m;
            gx.push(scale * (m * gorow[ci] - sum_g[ci] - xrow[ci] * sum_gx[ci]));
        }
    }
    Ok((
        Tensor::new(cache.xhat.shape(), gx)?,
        Tensor::new(&[c], sum_gx)?,
        Tensor::new(&[c], sum_g)?,
    ))
}

const GROUP_NORM_EPS: f64 = 1e-5;

/// Saved forward values a group-norm backward pass needs.
#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    groups: usize,
}

/// Per-sample normalization over contiguous channel groups and all spatial
/// positions; statistics never cross the batch axis, so behaviour does not
/// depend on batch size. `x` is `[N, ..., C]` and `groups` must divide `C`.
pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, GroupNormCache<T>)> {
    let c = check_norm_shapes(x, gamma, beta)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "group_norm groups {groups} must divide channel count {c}"
        )));
    }
    let n = x.shape()[0];
    let cpg = c / groups;
    let block = x.numel() / n;
    let m = T::from_f64((block / groups) as f64);
    let eps = T::from_f64(GROUP_NORM_EPS);
    let xs = x.data();

    let mut mean = vec![T::zero(); n * groups];
    for ni in 0..n {
        for row in xs[ni * block..(ni + 1) * block].chunks_exact(c) {
            for (ci, &v) in row.iter().enumerate() {
                mean[ni * groups + ci / cpg] += v;
            }
        }
    }
    for mc in mean.iter_mut() {
        *mc /= m;
    }
    let mut var = vec![T::zero(); n * groups];
    for ni in 0..n {
        for row in xs[ni * block..(ni + 1) * block].chunks_exact(c) {
            for (ci, &v) in row.iter().enumerate() {
                let dv = v - mean[ni * groups + ci / cpg];
                var[ni * groups + ci / cpg] += dv * dv;
            }
        }
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v / m + eps).sqrt())
        .collect();

    let mut xhat = Vec::with_capacity(xs.len());
    let mut out = Vec::with_capacity(xs.len());
    for ni in 0..n {
        for row in xs[ni * block..(ni + 1) * block].chunks_exact(c) {
            for (ci, &v) in row.iter().enumerate() {
                let gi = ni * groups + ci / cpg;
                let xh = (v - mean[gi]) * inv_std[gi];
                xhat.push(xh);
                out.push(gamma.data()[ci] * xh + beta.data()[ci]);
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        GroupNormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
            groups,
        },
    ))
}

pub fn group_norm_backward<T: Scalar>(
    cache: &GroupNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::ShapeMismatch(
            "group_norm grad shape differs from forward output".into(),
        ));
    }
    let c = gamma.numel();
    let groups = cache.groups;
    let cpg = c / groups;
    let n = cache.xhat.shape()[0];
    let block = cache.xhat.numel() / n;
    let m = T::from_f64((block / groups) as f64);
    let gos = grad_out.data();
    let xh = cache.xhat.data();

    let mut sum_dxh = vec![T::zero(); n * groups];
    let mut sum_dxh_xh = vec![T::zero(); n * groups];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ni in 0..n {
        let r = ni * block..(ni + 1) * block;
        for (gorow, xrow) in gos[r.clone()].chunks_exact(c).zip(xh[r].chunks_exact(c)) {
            for ci in 0..c {
                let gi = ni * groups + ci / cpg;
                let dxh = gamma.data()[ci] * gorow[ci];
                sum_dxh[gi] += dxh;
                sum_dxh_xh[gi] += dxh * xrow[ci];
                ggamma[ci] += gorow[ci] * xrow[ci];
                gbeta[ci] += gorow[ci];
            }
        }
    }

    let mut gx = Vec::with_capacity(gos.len());
    for ni in 0..n {
        let r = ni * block..(ni + 1) * block;
        for (gorow, xrow) in gos[r.clone()].chunks_exact(c).zip(xh[r].chunks_exact(c)) {
            for ci in 0..c {
                let gi = ni * groups + ci / cpg;
                let dxh = gamma.data()[ci] * gorow[ci];
                gx.push(
                    cache.inv_std[gi] / m * (m * dxh - sum_dxh[gi] - xrow[ci] * sum_dxh_xh[gi]),
                );
            }
        }
    }
    Ok((
        Tensor::new(cache.xhat.shape(), gx)?,
        Tensor::new(&[c], ggamma)?,
        Tensor::new(&[c], gbeta)?,
    ))
}

fn check_norm_shapes<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<usize> {
    if x.rank() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "normalization input must have rank >= 2, got shape {:?}",
            x.shape()
        )));
    }
    let c = *x.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "gamma {:?} / beta {:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

/// Which elements a dropout draw kept, plus the survivor scale.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    keep: Vec<bool>,
    keep_prob: f64,
}

impl DropoutMask {
    /// One Bernoulli(keep_prob) draw per element, in flat order.
    pub fn sample<R: Rng>(numel: usize, keep_prob: f64, rng: &mut R) -> Result<Self> {
        check_keep_prob(keep_prob)?;
        let keep = (0..numel)
            .map(|_| rng.random::<f64>() < keep_prob)
            .collect();
        Ok(DropoutMask { keep, keep_prob })
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }
}

fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep_prob must lie in (0, 1], got {keep_prob}"
        )));
    }
    Ok(())
}

/// Zeros dropped elements and scales survivors by `1/keep_prob` so the
/// expectation matches the input (inverted dropout).
pub fn dropout_apply<T: Scalar>(x: &Tensor<T>, mask: &DropoutMask) -> Result<Tensor<T>> {
    if mask.keep.len() != x.numel() {
        return Err(Error::ShapeMismatch(format!(
            "dropout mask covers {} elements, input has {}",
            mask.keep.len(),
            x.numel()
        )));
    }
    let scale = T::from_f64(1.0 / mask.keep_prob);
    let data = x
        .data()
        .iter()
        .zip(&mask.keep)
        .map(|(&v, &k)| if k { v * scale } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

/// The mask is constant through the op, so backward reuses `dropout_apply`.
pub fn dropout_backward<T: Scalar>(grad_out: &Tensor<T>, mask: &DropoutMask) -> Result<Tensor<T>> {
    dropout_apply(grad_out, mask)
}

/// Inverted dropout as a single call: identity at inference, masked and
/// rescaled during training.
pub fn dropout<T: Scalar, R: Rng>(
    x: &Tensor<T>,
    keep_prob: f64,
    rng: &mut R,
    training: bool,
) -> Result<Tensor<T>> {
    check_keep_prob(keep_prob)?;
    if !training {
        return Ok(x.clone());
    }
    let mask = DropoutMask::sample(x.numel(), keep_prob, rng)?;
    dropout_apply(x, &mask)
}

/// Row-wise softmax of `[N,C]` logits, stabilized by max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = dims2(logits, "softmax logits")?;
    let mut out = Vec::with_capacity(n * c);
    for row in logits.data().chunks_exact(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(&[n, c], out)
}

/// Mean negative log-likelihood of the true classes under row-wise softmax,
/// plus the probabilities. The loss is computed in log-sum-exp form so large
/// logits neither overflow nor produce `ln(0)`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, c) = dims2(logits, "softmax_cross_entropy logits")?;
    if c < 2 {
        return Err(Error::InvalidArgument(format!(
            "classification needs at least 2 classes, got {c}"
        )));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut probs = Vec::with_capacity(n * c);
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        loss += total.ln() - (row[label] - max);
        probs.extend(exps.into_iter().map(|e| e / total));
    }
    loss /= T::from_f64(n as f64);
    Ok((loss, Tensor::new(&[n, c], probs)?))
}

/// Gradient of the mean cross-entropy with respect to the logits:
/// `(probs - onehot(labels)) / N`.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let (n, c) = dims2(probs, "softmax_cross_entropy probs")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} probability rows",
            labels.len()
        )));
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut grad = probs.map(|p| p * inv_n);
    for (ni, &label) in labels.iter().enumerate() {
        let g = &mut grad.data_mut()[ni * c + label];
        *g -= inv_n;
    }
    Ok(grad)
}
