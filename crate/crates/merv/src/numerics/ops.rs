use super::{Scalar, Tensor};
use crate::error::{MervError, Result};

/// Splits a shape into (outer, len, inner) products around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(MervError::dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// Adaptive pooling window for output index `i`: `[floor(i*in/out), ceil((i+1)*in/out))`.
#[inline]
pub fn pool_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input + output - 1) / output;
    (start, end)
}

/// `a[m×k] · b[k×n]`, accumulated in a fixed i-k-j loop order.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(MervError::dimension(format!(
            "matmul expects rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(MervError::dimension(format!(
            "matmul inner extents differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for l in 0..k {
            let av = ad[i * k + l];
            if av == S::zero() {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose2<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 {
        return Err(MervError::dimension(format!(
            "transpose expects rank 2, got {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Gradients of `matmul`: `dA = g·Bᵀ`, `dB = Aᵀ·g`.
pub fn matmul_backward<S: Scalar>(
    grad: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let da = matmul(grad, &transpose2(b)?)?;
    let db = matmul(&transpose2(a)?, grad)?;
    Ok((da, db))
}

/// Batched `x·W (+ bias)`: `x` is `[..., k]`, `W` is `[k, n]`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, bias: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    if x.rank() == 0 || w.rank() != 2 {
        return Err(MervError::dimension(format!(
            "linear expects x [..., k] and W [k, n], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let k = *x.shape().last().unwrap();
    let (k2, n) = (w.shape()[0], w.shape()[1]);
    if k != k2 {
        return Err(MervError::dimension(format!(
            "linear: input width {k} vs weight rows {k2}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(MervError::dimension(format!(
                "linear: bias shape {:?}, expected [{n}]",
                b.shape()
            )));
        }
    }
    let rows = x.numel() / k;
    let flat = x.clone().reshape(vec![rows, k])?;
    let mut out = matmul(&flat, w)?;
    if let Some(b) = bias {
        let od = out.data_mut();
        let bd = b.data();
        for r in 0..rows {
            for j in 0..n {
                od[r * n + j] += bd[j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    out.reshape(shape)
}

/// Gradients of `linear`; `dbias` is returned when `has_bias` is set.
pub fn linear_backward<S: Scalar>(
    grad: &Tensor<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
    has_bias: bool,
) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let k = *x.shape().last().unwrap();
    let n = w.shape()[1];
    let rows = x.numel() / k;
    let gflat = grad.clone().reshape(vec![rows, n])?;
    let xflat = x.clone().reshape(vec![rows, k])?;
    let (dx, dw) = matmul_backward(&gflat, &xflat, w)?;
    let dbias = if has_bias {
        let mut db = vec![S::zero(); n];
        let gd = gflat.data();
        for r in 0..rows {
            for j in 0..n {
                db[j] += gd[r * n + j];
            }
        }
        Some(Tensor::new(vec![n], db)?)
    } else {
        None
    };
    Ok((dx.reshape(x.shape().to_vec())?, dw, dbias))
}

/// Softmax along `axis`, with the per-slice max subtracted before exponentiation.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![S::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let mut max = xd[idx(0)];
            for l in 1..len {
                if xd[idx(l)] > max {
                    max = xd[idx(l)];
                }
            }
            let mut sum = S::zero();
            for l in 0..len {
                let e = (xd[idx(l)] - max).exp();
                out[idx(l)] = e;
                sum += e;
            }
            for l in 0..len {
                out[idx(l)] = out[idx(l)] / sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradient of softmax given its output `y`: `dx = y ⊙ (g − Σ g⊙y)` per slice.
pub fn softmax_backward<S: Scalar>(grad: &Tensor<S>, y: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if grad.shape() != y.shape() {
        return Err(MervError::dimension(format!(
            "softmax_backward: grad {:?} vs output {:?}",
            grad.shape(),
            y.shape()
        )));
    }
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let gd = grad.data();
    let yd = y.data();
    let mut out = vec![S::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let mut dot = S::zero();
            for l in 0..len {
                dot += gd[idx(l)] * yd[idx(l)];
            }
            for l in 0..len {
                out[idx(l)] = yd[idx(l)] * (gd[idx(l)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

fn expect_rank4<S: Scalar>(x: &Tensor<S>, op: &str) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(MervError::dimension(format!(
            "{op} expects rank-4 [t, h, w, d], got {:?}",
            x.shape()
        )));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Adaptive 2D average pool over the spatial axes of a `[t, h, w, d]` tensor.
pub fn adaptive_avg_pool2d<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Result<Tensor<S>> {
    let (t, h, w, d) = expect_rank4(x, "adaptive_avg_pool2d")?;
    adaptive_avg_pool3d_inner(x, t, h, w, d, t, oh, ow)
}

/// Adaptive 3D average pool over the frame and spatial axes.
pub fn adaptive_avg_pool3d<S: Scalar>(
    x: &Tensor<S>,
    ot: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor<S>> {
    let (t, h, w, d) = expect_rank4(x, "adaptive_avg_pool3d")?;
    adaptive_avg_pool3d_inner(x, t, h, w, d, ot, oh, ow)
}

fn adaptive_avg_pool3d_inner<S: Scalar>(
    x: &Tensor<S>,
    t: usize,
    h: usize,
    w: usize,
    d: usize,
    ot: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor<S>> {
    if ot == 0 || oh == 0 || ow == 0 || ot > t || oh > h || ow > w {
        return Err(MervError::dimension(format!(
            "pool target ({ot}, {oh}, {ow}) invalid for input ({t}, {h}, {w})"
        )));
    }
    let xd = x.data();
    let mut out = vec![S::zero(); ot * oh * ow * d];
    for ti in 0..ot {
        let (t0, t1) = pool_window(ti, t, ot);
        for hi in 0..oh {
            let (h0, h1) = pool_window(hi, h, oh);
            for wi in 0..ow {
                let (w0, w1) = pool_window(wi, w, ow);
                let count = S::from_f64(((t1 - t0) * (h1 - h0) * (w1 - w0)) as f64);
                let obase = ((ti * oh + hi) * ow + wi) * d;
                for tt in t0..t1 {
                    for hh in h0..h1 {
                        for ww in w0..w1 {
                            let ibase = ((tt * h + hh) * w + ww) * d;
                            for c in 0..d {
                                out[obase + c] += xd[ibase + c];
                            }
                        }
                    }
                }
                for c in 0..d {
                    out[obase + c] = out[obase + c] / count;
                }
            }
        }
    }
    Tensor::new(vec![ot, oh, ow, d], out)
}

/// Scatters pooled gradients back: each input cell receives `g / window_size`.
pub fn adaptive_avg_pool3d_backward<S: Scalar>(
    grad: &Tensor<S>,
    input_shape: &[usize],
) -> Result<Tensor<S>> {
    if input_shape.len() != 4 || grad.rank() != 4 {
        return Err(MervError::dimension(
            "pool backward expects rank-4 shapes".to_string(),
        ));
    }
    let (t, h, w, d) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (ot, oh, ow, gd_) = (
        grad.shape()[0],
        grad.shape()[1],
        grad.shape()[2],
        grad.shape()[3],
    );
    if gd_ != d {
        return Err(MervError::dimension(format!(
            "pool backward channel mismatch: {gd_} vs {d}"
        )));
    }
    let gd = grad.data();
    let mut out = vec![S::zero(); t * h * w * d];
    for ti in 0..ot {
        let (t0, t1) = pool_window(ti, t, ot);
        for hi in 0..oh {
            let (h0, h1) = pool_window(hi, h, oh);
            for wi in 0..ow {
                let (w0, w1) = pool_window(wi, w, ow);
                let scale = S::one() / S::from_f64(((t1 - t0) * (h1 - h0) * (w1 - w0)) as f64);
                let gbase = ((ti * oh + hi) * ow + wi) * d;
                for tt in t0..t1 {
                    for hh in h0..h1 {
                        for ww in w0..w1 {
                            let ibase = ((tt * h + hh) * w + ww) * d;
                            for c in 0..d {
                                out[ibase + c] += gd[gbase + c] * scale;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

pub fn adaptive_avg_pool2d_backward<S: Scalar>(
    grad: &Tensor<S>,
    input_shape: &[usize],
) -> Result<Tensor<S>> {
    adaptive_avg_pool3d_backward(grad, input_shape)
}

/// Arithmetic mean along `axis`; the output shape drops that axis.
pub fn mean_over_axis<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let inv = S::one() / S::from_f64(len as f64);
    let mut out = vec![S::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                out[o * inner + i] += xd[(o * len + l) * inner + i];
            }
        }
    }
    for v in &mut out {
        *v = *v * inv;
    }
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)
}

/// Gradient of `mean_over_axis`: broadcast `g / len` back along the axis.
pub fn mean_over_axis_backward<S: Scalar>(
    grad: &Tensor<S>,
    input_shape: &[usize],
    axis: usize,
) -> Result<Tensor<S>> {
    let (outer, len, inner) = axis_split(input_shape, axis)?;
    if grad.numel() != outer * inner {
        return Err(MervError::dimension(format!(
            "mean backward: grad has {} elements, expected {}",
            grad.numel(),
            outer * inner
        )));
    }
    let gd = grad.data();
    let inv = S::one() / S::from_f64(len as f64);
    let mut out = vec![S::zero(); outer * len * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                out[(o * len + l) * inner + i] = gd[o * inner + i] * inv;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Zero-pads the frame axis of a `[t, h, w, d]` tensor.
pub fn zero_pad_time<S: Scalar>(x: &Tensor<S>, front: usize, back: usize) -> Result<Tensor<S>> {
    let (t, h, w, d) = expect_rank4(x, "zero_pad_time")?;
    let mut out = Tensor::zeros(vec![t + front + back, h, w, d]);
    let frame = h * w * d;
    out.data_mut()[front * frame..(front + t) * frame].copy_from_slice(x.data());
    Ok(out)
}

/// Drops padded frames from a gradient, inverse of `zero_pad_time`.
pub fn zero_pad_time_backward<S: Scalar>(
    grad: &Tensor<S>,
    front: usize,
    input_t: usize,
) -> Result<Tensor<S>> {
    let (_, h, w, d) = expect_rank4(grad, "zero_pad_time_backward")?;
    let frame = h * w * d;
    let data = grad.data()[front * frame..(front + input_t) * frame].to_vec();
    Tensor::new(vec![input_t, h, w, d], data)
}

/// Direct 3D cross-correlation of `[t, h, w, c_in]` with `[kt, kh, kw, c_in, c_out]`,
/// with symmetric zero padding per axis.
pub fn conv3d_simple<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<S>> {
    let (t, h, w, cin) = expect_rank4(x, "conv3d_simple")?;
    if kernel.rank() != 5 {
        return Err(MervError::dimension(format!(
            "conv3d_simple kernel must be rank 5, got {:?}",
            kernel.shape()
        )));
    }
    let ks = kernel.shape();
    let (kt, kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3], ks[4]);
    if kcin != cin {
        return Err(MervError::dimension(format!(
            "conv3d_simple: input channels {cin} vs kernel {kcin}"
        )));
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(MervError::dimension("conv stride must be positive".to_string()));
    }
    let out_extent = |n: usize, k: usize, s: usize, p: usize| -> Result<usize> {
        let padded = n + 2 * p;
        if padded < k {
            return Err(MervError::dimension(format!(
                "conv kernel extent {k} exceeds padded input {padded}"
            )));
        }
        Ok((padded - k) / s + 1)
    };
    let ot = out_extent(t, kt, stride[0], padding[0])?;
    let oh = out_extent(h, kh, stride[1], padding[1])?;
    let ow = out_extent(w, kw, stride[2], padding[2])?;

    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![S::zero(); ot * oh * ow * cout];
    for oti in 0..ot {
        for ohi in 0..oh {
            for owi in 0..ow {
                let obase = ((oti * oh + ohi) * ow + owi) * cout;
                for dt in 0..kt {
                    let it = (oti * stride[0] + dt) as isize - padding[0] as isize;
                    if it < 0 || it as usize >= t {
                        continue;
                    }
                    for dh in 0..kh {
                        let ih = (ohi * stride[1] + dh) as isize - padding[1] as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for dw in 0..kw {
                            let iw = (owi * stride[2] + dw) as isize - padding[2] as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            let ibase =
                                (((it as usize) * h + ih as usize) * w + iw as usize) * cin;
                            let kbase = ((dt * kh + dh) * kw + dw) * cin * cout;
                            for ci in 0..cin {
                                let xv = xd[ibase + ci];
                                if xv == S::zero() {
                                    continue;
                                }
                                let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                for co in 0..cout {
                                    out[obase + co] += xv * krow[co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ot, oh, ow, cout], out)
}

/// Gradients of `conv3d_simple` with respect to the input and the kernel.
pub fn conv3d_simple_backward<S: Scalar>(
    grad: &Tensor<S>,
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (t, h, w, cin) = expect_rank4(x, "conv3d_simple_backward")?;
    let ks = kernel.shape();
    let (kt, kh, kw, _, cout) = (ks[0], ks[1], ks[2], ks[3], ks[4]);
    let (ot, oh, ow, gcout) = expect_rank4(grad, "conv3d_simple_backward")?;
    if gcout != cout {
        return Err(MervError::dimension(format!(
            "conv backward: grad channels {gcout} vs kernel out {cout}"
        )));
    }
    let xd = x.data();
    let kd = kernel.data();
    let gd = grad.data();
    let mut dx = vec![S::zero(); xd.len()];
    let mut dk = vec![S::zero(); kd.len()];
    for oti in 0..ot {
        for ohi in 0..oh {
            for owi in 0..ow {
                let obase = ((oti * oh + ohi) * ow + owi) * cout;
                for dt in 0..kt {
                    let it = (oti * stride[0] + dt) as isize - padding[0] as isize;
                    if it < 0 || it as usize >= t {
                        continue;
                    }
                    for dh in 0..kh {
                        let ih = (ohi * stride[1] + dh) as isize - padding[1] as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for dw in 0..kw {
                            let iw = (owi * stride[2] + dw) as isize - padding[2] as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            let ibase =
                                (((it as usize) * h + ih as usize) * w + iw as usize) * cin;
                            let kbase = ((dt * kh + dh) * kw + dw) * cin * cout;
                            for ci in 0..cin {
                                let xv = xd[ibase + ci];
                                let mut acc = S::zero();
                                for co in 0..cout {
                                    let g = gd[obase + co];
                                    acc += g * kd[kbase + ci * cout + co];
                                    dk[kbase + ci * cout + co] += g * xv;
                                }
                                dx[ibase + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
    ))
}

/// GELU, tanh approximation.
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

#[inline]
fn gelu_scalar<S: Scalar>(v: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let inner = c * (v + a * v * v * v);
    half * v * (S::one() + inner.tanh())
}

pub fn gelu_backward<S: Scalar>(grad: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if grad.shape() != x.shape() {
        return Err(MervError::dimension("gelu_backward shape mismatch".to_string()));
    }
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let inner = c * (v + a * v * v * v);
            let th = inner.tanh();
            let sech2 = S::one() - th * th;
            let dinner = c * (S::one() + three * a * v * v);
            g * (half * (S::one() + th) + half * v * sech2 * dinner)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Per-row normalization statistics cached for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<S> {
    pub mean: Vec<S>,
    pub rstd: Vec<S>,
}

/// Layer normalization over the last axis with learned scale and shift.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, LayerNormCache<S>)> {
    let d = *x.shape().last().ok_or_else(|| {
        MervError::dimension("layer_norm on rank-0 tensor".to_string())
    })?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(MervError::dimension(format!(
            "layer_norm: params must have shape [{d}]"
        )));
    }
    let rows = x.numel() / d;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let inv = S::one() / S::from_f64(d as f64);
    let epss = S::from_f64(eps);
    let mut out = vec![S::zero(); xd.len()];
    let mut mean = vec![S::zero(); rows];
    let mut rstd = vec![S::zero(); rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mut m = S::zero();
        for &v in row {
            m += v;
        }
        m = m * inv;
        let mut var = S::zero();
        for &v in row {
            let c = v - m;
            var += c * c;
        }
        var = var * inv;
        let rs = S::one() / (var + epss).sqrt();
        mean[r] = m;
        rstd[r] = rs;
        for j in 0..d {
            out[r * d + j] = (row[j] - m) * rs * gd[j] + bd[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache { mean, rstd },
    ))
}

pub fn layer_norm_backward<S: Scalar>(
    grad: &Tensor<S>,
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    cache: &LayerNormCache<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let d = *x.shape().last().unwrap();
    let rows = x.numel() / d;
    let xd = x.data();
    let gd = grad.data();
    let gmd = gamma.data();
    let inv = S::one() / S::from_f64(d as f64);
    let mut dx = vec![S::zero(); xd.len()];
    let mut dgamma = vec![S::zero(); d];
    let mut dbeta = vec![S::zero(); d];
    for r in 0..rows {
        let m = cache.mean[r];
        let rs = cache.rstd[r];
        // xhat_j = (x_j - m) * rs; dL/dxhat_j = g_j * gamma_j
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for j in 0..d {
            let xhat = (xd[r * d + j] - m) * rs;
            let dxhat = gd[r * d + j] * gmd[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[j] += gd[r * d + j] * xhat;
            dbeta[j] += gd[r * d + j];
        }
        for j in 0..d {
            let xhat = (xd[r * d + j] - m) * rs;
            let dxhat = gd[r * d + j] * gmd[j];
            dx[r * d + j] = rs * (dxhat - inv * sum_dxhat - xhat * inv * sum_dxhat_xhat);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![d], dgamma)?,
        Tensor::new(vec![d], dbeta)?,
    ))
}

/// Central-difference gradient of a scalar function, `(f(x+εe) − f(x−εe)) / 2ε`
/// per coordinate, evaluated in f64.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    eps: f64,
) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = vec![0.0f64; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("shape preserved")
}

/// Worst-case relative disagreement between two gradients. Coordinates where
/// both values are below the floor compare as equal.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let floor = 1e-6;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let denom = x.abs().max(y.abs());
            if denom < floor {
                (x - y).abs() / floor
            } else {
                (x - y).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}
