//! Differentiable operations.
//!
//! Each operation validates shapes, computes its output eagerly, and records
//! a tape entry when recording is on and some input requires a gradient.
//! Backward rules live in [`backward_entry`], dispatched from
//! [`crate::tape::Tape::backward`]. Every rule produces finite gradients for
//! finite inputs; the non-smooth points (relu at 0, l2_norm at the origin)
//! use the zero subgradient.

mod conv;
mod resize;

use alloc::vec;
use alloc::vec::Vec;

use crate::augment::CropParams;
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeOp};
use crate::tensor::{numel, Tensor, TensorError};

pub use resize::resize_view_raw;

fn require(cond: bool, op: &'static str, detail: &str) -> Result<(), TensorError> {
    if cond {
        Ok(())
    } else {
        Err(TensorError::InvalidArgument {
            op,
            detail: alloc::string::String::from(detail),
        })
    }
}

fn shape_err<T>(op: &'static str, detail: alloc::string::String) -> Result<T, TensorError> {
    Err(TensorError::ShapeMismatch { op, detail })
}

/// Sum after sorting, so the result depends only on the multiset of values.
/// Batch statistics reduce per-image partials through this to stay exactly
/// invariant under batch permutation.
fn sorted_sum<T: Scalar>(values: &mut [T]) -> T {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let mut acc = T::zero();
    for &v in values.iter() {
        acc = acc + v;
    }
    acc
}

fn nchw<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
) -> Result<(usize, usize, usize, usize), TensorError> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err(op, alloc::format!("expected NCHW input, got {:?}", x.shape())),
    }
}

fn finish<T: Scalar>(
    tape: &Tape<T>,
    data: Vec<T>,
    shape: Vec<usize>,
    grad_needed: bool,
    make_entry: impl FnOnce(Tensor<T>) -> TapeOp<T>,
) -> Tensor<T> {
    let rg = tape.is_recording() && grad_needed;
    let out = Tensor::output(data, shape, rg);
    if rg {
        tape.record(make_entry(out.clone()));
    }
    out
}

/// Elementwise `a + b` (identical shapes).
pub fn add<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return shape_err("add", alloc::format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = {
        let (xa, xb) = (a.data(), b.data());
        xa.iter().zip(xb.iter()).map(|(&x, &y)| x + y).collect()
    };
    Ok(finish(
        tape,
        data,
        a.shape().to_vec(),
        a.requires_grad() || b.requires_grad(),
        |out| TapeOp::Add { a: a.clone(), b: b.clone(), out },
    ))
}

/// Elementwise `a - b` (identical shapes).
pub fn sub<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return shape_err("sub", alloc::format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = {
        let (xa, xb) = (a.data(), b.data());
        xa.iter().zip(xb.iter()).map(|(&x, &y)| x - y).collect()
    };
    Ok(finish(
        tape,
        data,
        a.shape().to_vec(),
        a.requires_grad() || b.requires_grad(),
        |out| TapeOp::Sub { a: a.clone(), b: b.clone(), out },
    ))
}

/// Elementwise `a * b` (identical shapes).
pub fn mul<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return shape_err("mul", alloc::format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = {
        let (xa, xb) = (a.data(), b.data());
        xa.iter().zip(xb.iter()).map(|(&x, &y)| x * y).collect()
    };
    Ok(finish(
        tape,
        data,
        a.shape().to_vec(),
        a.requires_grad() || b.requires_grad(),
        |out| TapeOp::Mul { a: a.clone(), b: b.clone(), out },
    ))
}

/// `c * x` for a compile-time-known constant factor.
pub fn scale<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, c: T) -> Result<Tensor<T>, TensorError> {
    let data = x.data().iter().map(|&v| v * c).collect();
    Ok(finish(
        tape,
        data,
        x.shape().to_vec(),
        x.requires_grad(),
        |out| TapeOp::Scale { x: x.clone(), c, out },
    ))
}

/// Matrix product `a (M,K) @ b (K,N) -> (M,N)`.
pub fn matmul<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        _ => return shape_err("matmul", alloc::format!("lhs must be 2-d, got {:?}", a.shape())),
    };
    let (kb, n) = match *b.shape() {
        [kb, n] => (kb, n),
        _ => return shape_err("matmul", alloc::format!("rhs must be 2-d, got {:?}", b.shape())),
    };
    if k != kb {
        return shape_err("matmul", alloc::format!("inner dims differ: {k} vs {kb}"));
    }
    let mut data = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data(),
        (k as isize, 1),
        &b.data(),
        (n as isize, 1),
        T::zero(),
        &mut data,
        (n as isize, 1),
    );
    Ok(finish(
        tape,
        data,
        vec![m, n],
        a.requires_grad() || b.requires_grad(),
        |out| TapeOp::Matmul { a: a.clone(), b: b.clone(), out },
    ))
}

/// Row-broadcast add: `x (N,F) + bias (F)`.
pub fn bias_add<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, f) = match *x.shape() {
        [n, f] => (n, f),
        _ => return shape_err("bias_add", alloc::format!("input must be 2-d, got {:?}", x.shape())),
    };
    if bias.shape() != [f] {
        return shape_err(
            "bias_add",
            alloc::format!("bias {:?} does not match feature dim {f}", bias.shape()),
        );
    }
    let data = {
        let (xd, bd) = (x.data(), bias.data());
        let mut out = Vec::with_capacity(n * f);
        for row in 0..n {
            for col in 0..f {
                out.push(xd[row * f + col] + bd[col]);
            }
        }
        out
    };
    Ok(finish(
        tape,
        data,
        vec![n, f],
        x.requires_grad() || bias.requires_grad(),
        |out| TapeOp::BiasAdd { x: x.clone(), bias: bias.clone(), out },
    ))
}

/// 2-d convolution, NCHW input, OIHW weights, zero padding, no bias.
pub fn conv2d<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, wd) = nchw("conv2d", x)?;
    let (oc, ic, kh, kw) = match *w.shape() {
        [oc, ic, kh, kw] => (oc, ic, kh, kw),
        _ => return shape_err("conv2d", alloc::format!("weights must be OIHW, got {:?}", w.shape())),
    };
    if ic != c {
        return shape_err("conv2d", alloc::format!("input channels {c} vs weight channels {ic}"));
    }
    require(stride >= 1, "conv2d", "stride must be >= 1")?;
    require(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d", "kernel larger than padded input")?;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let data = conv::forward(&x.data(), n, c, h, wd, &w.data(), oc, kh, kw, stride, pad, oh, ow);
    Ok(finish(
        tape,
        data,
        vec![n, oc, oh, ow],
        x.requires_grad() || w.requires_grad(),
        |out| TapeOp::Conv2d { x: x.clone(), w: w.clone(), out, stride, pad },
    ))
}

/// Elementwise `max(x, 0)`.
pub fn relu<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let z = T::zero();
    let data = x.data().iter().map(|&v| if v > z { v } else { z }).collect();
    Ok(finish(
        tape,
        data,
        x.shape().to_vec(),
        x.requires_grad(),
        |out| TapeOp::Relu { x: x.clone(), out },
    ))
}

/// Average pooling with a square window.
pub fn avg_pool2d<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = nchw("avg_pool2d", x)?;
    require(k >= 1 && stride >= 1, "avg_pool2d", "window and stride must be >= 1")?;
    require(h >= k && w >= k, "avg_pool2d", "window larger than input")?;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut data = vec![T::zero(); n * c * oh * ow];
    {
        let xd = x.data();
        for img in 0..n * c {
            let src = &xd[img * h * w..(img + 1) * h * w];
            let dst = &mut data[img * oh * ow..(img + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let row = (oy * stride + ky) * w + ox * stride;
                        for kx in 0..k {
                            acc = acc + src[row + kx];
                        }
                    }
                    dst[oy * ow + ox] = acc * inv;
                }
            }
        }
    }
    Ok(finish(
        tape,
        data,
        vec![n, c, oh, ow],
        x.requires_grad(),
        |out| TapeOp::AvgPool2d { x: x.clone(), out, k, stride },
    ))
}

/// Reinterpret the buffer under a new shape with equal element count.
pub fn reshape<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    shape: &[usize],
) -> Result<Tensor<T>, TensorError> {
    if numel(shape) != x.numel() {
        return shape_err(
            "reshape",
            alloc::format!("cannot view {:?} as {:?}", x.shape(), shape),
        );
    }
    let data = x.to_vec();
    Ok(finish(
        tape,
        data,
        shape.to_vec(),
        x.requires_grad(),
        |out| TapeOp::Reshape { x: x.clone(), out },
    ))
}

/// Collapse all trailing dims: `(N, ...) -> (N, prod(...))`.
pub fn flatten<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| TensorError::ShapeMismatch {
            op: "flatten",
            detail: alloc::string::String::from("input must have at least one dim"),
        })?;
    let rest = x.numel() / n.max(1);
    reshape(tape, x, &[n, rest])
}

/// Per-channel mean over batch and spatial dims: `(N,C,H,W) -> (C)`.
pub fn channel_mean<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = nchw("channel_mean", x)?;
    let count = T::from_f64((n * h * w) as f64);
    let mut data = vec![T::zero(); c];
    {
        let xd = x.data();
        let mut partials = vec![T::zero(); n];
        for ch in 0..c {
            for (img, p) in partials.iter_mut().enumerate() {
                let base = (img * c + ch) * h * w;
                let mut acc = T::zero();
                for &v in &xd[base..base + h * w] {
                    acc = acc + v;
                }
                *p = acc;
            }
            data[ch] = sorted_sum(&mut partials);
        }
    }
    for v in data.iter_mut() {
        *v = *v / count;
    }
    Ok(finish(
        tape,
        data,
        vec![c],
        x.requires_grad(),
        |out| TapeOp::ChannelMean { x: x.clone(), out },
    ))
}

/// Per-channel biased variance around a given per-channel center:
/// `var[c] = mean_{n,h,w} (x - center[c])^2`.
pub fn channel_var<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    center: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = nchw("channel_var", x)?;
    if center.shape() != [c] {
        return shape_err(
            "channel_var",
            alloc::format!("center {:?} does not match channels {c}", center.shape()),
        );
    }
    let count = T::from_f64((n * h * w) as f64);
    let mut data = vec![T::zero(); c];
    {
        let (xd, md) = (x.data(), center.data());
        let mut partials = vec![T::zero(); n];
        for ch in 0..c {
            let m = md[ch];
            for (img, p) in partials.iter_mut().enumerate() {
                let base = (img * c + ch) * h * w;
                let mut acc = T::zero();
                for &v in &xd[base..base + h * w] {
                    let d = v - m;
                    acc = acc + d * d;
                }
                *p = acc;
            }
            data[ch] = sorted_sum(&mut partials);
        }
    }
    for v in data.iter_mut() {
        *v = *v / count;
    }
    Ok(finish(
        tape,
        data,
        vec![c],
        x.requires_grad() || center.requires_grad(),
        |out| TapeOp::ChannelVar { x: x.clone(), mean: center.clone(), out },
    ))
}

/// Channel-affine normalization:
/// `y = gamma[c] * (x - mean[c]) / sqrt(var[c] + eps) + beta[c]`.
///
/// Differentiable in `x`, `mean`, `var`, `gamma`, and `beta`, so composing it
/// with [`channel_mean`]/[`channel_var`] yields the full batch-norm gradient,
/// while passing constant running stats yields the evaluation-mode gradient.
pub fn normalize<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = nchw("normalize", x)?;
    for (name, t) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return shape_err(
                "normalize",
                alloc::format!("{name} {:?} does not match channels {c}", t.shape()),
            );
        }
    }
    require(eps > T::zero(), "normalize", "eps must be > 0")?;
    {
        let vd = var.data();
        if vd.iter().any(|&v| v + eps <= T::zero()) {
            return Err(TensorError::InvalidArgument {
                op: "normalize",
                detail: alloc::string::String::from("var + eps must be positive per channel"),
            });
        }
    }
    let mut data = vec![T::zero(); x.numel()];
    {
        let (xd, md, vd, gd, bd) = (x.data(), mean.data(), var.data(), gamma.data(), beta.data());
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let inv = (vd[ch] + eps).sqrt().recip();
                let (g, m, b) = (gd[ch], md[ch], bd[ch]);
                for i in base..base + h * w {
                    data[i] = g * (xd[i] - m) * inv + b;
                }
            }
        }
    }
    let grad_needed = x.requires_grad()
        || mean.requires_grad()
        || var.requires_grad()
        || gamma.requires_grad()
        || beta.requires_grad();
    Ok(finish(tape, data, vec![n, c, h, w], grad_needed, |out| TapeOp::Normalize {
        x: x.clone(),
        mean: mean.clone(),
        var: var.clone(),
        gamma: gamma.clone(),
        beta: beta.clone(),
        out,
        eps,
    }))
}

/// Row-wise log-softmax over `(N, C)` logits, computed via the max-shifted
/// log-sum-exp so large logits cannot overflow.
pub fn log_softmax<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, c) = match *x.shape() {
        [n, c] => (n, c),
        _ => return shape_err("log_softmax", alloc::format!("input must be 2-d, got {:?}", x.shape())),
    };
    require(c >= 1, "log_softmax", "need at least one class")?;
    let mut data = vec![T::zero(); n * c];
    {
        let xd = x.data();
        for row in 0..n {
            let r = &xd[row * c..(row + 1) * c];
            let mut m = r[0];
            for &v in r {
                if v > m {
                    m = v;
                }
            }
            let mut lse = T::zero();
            for &v in r {
                lse = lse + (v - m).exp();
            }
            let lse = m + lse.ln();
            for (i, &v) in r.iter().enumerate() {
                data[row * c + i] = v - lse;
            }
        }
    }
    Ok(finish(
        tape,
        data,
        vec![n, c],
        x.requires_grad(),
        |out| TapeOp::LogSoftmax { x: x.clone(), out },
    ))
}

/// Bilinear resize of the whole image to `(out_h, out_w)`, half-pixel-center
/// convention. Resizing to the input size is an exact identity.
pub fn bilinear_resize<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = nchw("bilinear_resize", x)?;
    require(out_h >= 1 && out_w >= 1, "bilinear_resize", "output dims must be >= 1")?;
    let full = CropParams::full(h, w);
    let mut data = vec![T::zero(); n * c * out_h * out_w];
    {
        let xd = x.data();
        for img in 0..n {
            resize::forward_rect(
                &xd[img * c * h * w..(img + 1) * c * h * w],
                c,
                h,
                w,
                &full,
                out_h,
                out_w,
                &mut data[img * c * out_h * out_w..(img + 1) * c * out_h * out_w],
            );
        }
    }
    Ok(finish(
        tape,
        data,
        vec![n, c, out_h, out_w],
        x.requires_grad(),
        |out| TapeOp::BilinearResize { x: x.clone(), out },
    ))
}

/// Differentiable per-image crop + bilinear resize (+ optional horizontal
/// flip), one [`CropParams`] per batch image. Gradients flow only into the
/// cropped region of each source image.
pub fn crop_resize<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    params: &[CropParams],
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = nchw("crop_resize", x)?;
    if params.len() != n {
        return shape_err(
            "crop_resize",
            alloc::format!("{} crop params for batch of {n}", params.len()),
        );
    }
    require(out_h >= 1 && out_w >= 1, "crop_resize", "output dims must be >= 1")?;
    for p in params {
        let fits = p.height >= 1
            && p.width >= 1
            && (p.top + p.height) as usize <= h
            && (p.left + p.width) as usize <= w;
        require(fits, "crop_resize", "crop rect must lie inside the image")?;
    }
    let mut data = vec![T::zero(); n * c * out_h * out_w];
    {
        let xd = x.data();
        for (img, p) in params.iter().enumerate() {
            resize::forward_rect(
                &xd[img * c * h * w..(img + 1) * c * h * w],
                c,
                h,
                w,
                p,
                out_h,
                out_w,
                &mut data[img * c * out_h * out_w..(img + 1) * c * out_h * out_w],
            );
        }
    }
    Ok(finish(
        tape,
        data,
        vec![n, c, out_h, out_w],
        x.requires_grad(),
        |out| TapeOp::CropResize { x: x.clone(), out, params: params.to_vec() },
    ))
}

/// Batch-uniform crop of `(crop_h, crop_w)` at `(top, left)`.
pub fn crop<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    top: usize,
    left: usize,
    crop_h: usize,
    crop_w: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = nchw("crop", x)?;
    require(
        crop_h >= 1 && crop_w >= 1 && top + crop_h <= h && left + crop_w <= w,
        "crop",
        "crop rect must lie inside the image",
    )?;
    let mut data = vec![T::zero(); n * c * crop_h * crop_w];
    {
        let xd = x.data();
        for img in 0..n * c {
            let src = &xd[img * h * w..(img + 1) * h * w];
            let dst = &mut data[img * crop_h * crop_w..(img + 1) * crop_h * crop_w];
            for y in 0..crop_h {
                let s = (top + y) * w + left;
                dst[y * crop_w..(y + 1) * crop_w].copy_from_slice(&src[s..s + crop_w]);
            }
        }
    }
    Ok(finish(
        tape,
        data,
        vec![n, c, crop_h, crop_w],
        x.requires_grad(),
        |out| TapeOp::Crop { x: x.clone(), out, top, left },
    ))
}

/// Zero-pad both spatial dims by `pad` on each side.
pub fn pad<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, pad_by: usize) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = nchw("pad", x)?;
    let (oh, ow) = (h + 2 * pad_by, w + 2 * pad_by);
    let mut data = vec![T::zero(); n * c * oh * ow];
    {
        let xd = x.data();
        for img in 0..n * c {
            let src = &xd[img * h * w..(img + 1) * h * w];
            let dst = &mut data[img * oh * ow..(img + 1) * oh * ow];
            for y in 0..h {
                let d = (y + pad_by) * ow + pad_by;
                dst[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(finish(
        tape,
        data,
        vec![n, c, oh, ow],
        x.requires_grad(),
        |out| TapeOp::Pad { x: x.clone(), out, pad: pad_by },
    ))
}

/// Sum of all elements (scalar output, shape `[]`).
pub fn sum<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let mut acc = T::zero();
    for &v in x.data().iter() {
        acc = acc + v;
    }
    Ok(finish(
        tape,
        vec![acc],
        Vec::new(),
        x.requires_grad(),
        |out| TapeOp::Sum { x: x.clone(), out },
    ))
}

/// Mean of all elements (scalar output, shape `[]`).
pub fn mean_all<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    require(x.numel() > 0, "mean_all", "input must be non-empty")?;
    let mut acc = T::zero();
    for &v in x.data().iter() {
        acc = acc + v;
    }
    let data = vec![acc / T::from_f64(x.numel() as f64)];
    Ok(finish(
        tape,
        data,
        Vec::new(),
        x.requires_grad(),
        |out| TapeOp::MeanAll { x: x.clone(), out },
    ))
}

/// Euclidean norm of all elements (scalar output). The gradient at the exact
/// origin is zero (subgradient choice), so it stays finite everywhere.
pub fn l2_norm<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let mut acc = T::zero();
    for &v in x.data().iter() {
        acc = acc + v * v;
    }
    Ok(finish(
        tape,
        vec![acc.sqrt()],
        Vec::new(),
        x.requires_grad(),
        |out| TapeOp::L2Norm { x: x.clone(), out },
    ))
}

/// Backward rule dispatch; `g_out` is the loss gradient of the entry output.
pub(crate) fn backward_entry<T: Scalar>(entry: &TapeOp<T>, g_out: &[T]) {
    match entry {
        TapeOp::Add { a, b, .. } => {
            if a.requires_grad() {
                a.accumulate_grad(g_out);
            }
            if b.requires_grad() {
                b.accumulate_grad(g_out);
            }
        }
        TapeOp::Sub { a, b, .. } => {
            if a.requires_grad() {
                a.accumulate_grad(g_out);
            }
            if b.requires_grad() {
                let neg: Vec<T> = g_out.iter().map(|&g| T::zero() - g).collect();
                b.accumulate_grad(&neg);
            }
        }
        TapeOp::Mul { a, b, .. } => {
            if a.requires_grad() {
                let bd = b.data();
                let da: Vec<T> = g_out.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.data();
                let db: Vec<T> = g_out.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect();
                b.accumulate_grad(&db);
            }
        }
        TapeOp::Scale { x, c, .. } => {
            if x.requires_grad() {
                let dx: Vec<T> = g_out.iter().map(|&g| g * *c).collect();
                x.accumulate_grad(&dx);
            }
        }
        TapeOp::Matmul { a, b, .. } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                let mut da = vec![T::zero(); m * k];
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g_out,
                    (n as isize, 1),
                    &b.data(),
                    (1, n as isize),
                    T::zero(),
                    &mut da,
                    (k as isize, 1),
                );
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let mut db = vec![T::zero(); k * n];
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    &a.data(),
                    (1, k as isize),
                    g_out,
                    (n as isize, 1),
                    T::zero(),
                    &mut db,
                    (n as isize, 1),
                );
                b.accumulate_grad(&db);
            }
        }
        TapeOp::BiasAdd { x, bias, .. } => {
            let (n, f) = (x.shape()[0], x.shape()[1]);
            if x.requires_grad() {
                x.accumulate_grad(g_out);
            }
            if bias.requires_grad() {
                let mut db = vec![T::zero(); f];
                for row in 0..n {
                    for col in 0..f {
                        db[col] = db[col] + g_out[row * f + col];
                    }
                }
                bias.accumulate_grad(&db);
            }
        }
        TapeOp::Conv2d { x, w, out, stride, pad } => {
            conv::backward(x, w, out.shape(), g_out, *stride, *pad);
        }
        TapeOp::Relu { x, .. } => {
            if x.requires_grad() {
                let xd = x.data();
                let z = T::zero();
                let dx: Vec<T> = g_out
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v > z { g } else { z })
                    .collect();
                drop(xd);
                x.accumulate_grad(&dx);
            }
        }
        TapeOp::AvgPool2d { x, out, k, stride } => {
            if x.requires_grad() {
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let planes = x.shape()[0] * x.shape()[1];
                let inv = T::from_f64(1.0 / (k * k) as f64);
                let mut dx = vec![T::zero(); x.numel()];
                for img in 0..planes {
                    let g = &g_out[img * oh * ow..(img + 1) * oh * ow];
                    let d = &mut dx[img * h * w..(img + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[oy * ow + ox] * inv;
                            for ky in 0..*k {
                                let row = (oy * stride + ky) * w + ox * stride;
                                for kx in 0..*k {
                                    d[row + kx] = d[row + kx] + gv;
                                }
                            }
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        TapeOp::Reshape { x, .. } => {
            if x.requires_grad() {
                x.accumulate_grad(g_out);
            }
        }
        TapeOp::Normalize { x, mean, var, gamma, beta, eps, .. } => {
            backward_normalize(x, mean, var, gamma, beta, *eps, g_out);
        }
        TapeOp::ChannelMean { x, .. } => {
            if x.requires_grad() {
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let inv = T::from_f64(1.0 / (n * h * w) as f64);
                let mut dx = vec![T::zero(); x.numel()];
                for img in 0..n {
                    for ch in 0..c {
                        let gv = g_out[ch] * inv;
                        let base = (img * c + ch) * h * w;
                        for v in &mut dx[base..base + h * w] {
                            *v = gv;
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        TapeOp::ChannelVar { x, mean, .. } => {
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let count = T::from_f64((n * h * w) as f64);
            let two = T::from_f64(2.0);
            if x.requires_grad() {
                let (xd, md) = (x.data(), mean.data());
                let mut dx = vec![T::zero(); x.numel()];
                for img in 0..n {
                    for ch in 0..c {
                        let coef = g_out[ch] * two / count;
                        let m = md[ch];
                        let base = (img * c + ch) * h * w;
                        for i in base..base + h * w {
                            dx[i] = coef * (xd[i] - m);
                        }
                    }
                }
                drop(xd);
                drop(md);
                x.accumulate_grad(&dx);
            }
            if mean.requires_grad() {
                let (xd, md) = (x.data(), mean.data());
                let mut dm = vec![T::zero(); c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * h * w;
                        let m = md[ch];
                        let mut acc = T::zero();
                        for &v in &xd[base..base + h * w] {
                            acc = acc + (v - m);
                        }
                        dm[ch] = dm[ch] + acc;
                    }
                }
                for ch in 0..c {
                    dm[ch] = g_out[ch] * (T::zero() - two) * dm[ch] / count;
                }
                drop(xd);
                drop(md);
                mean.accumulate_grad(&dm);
            }
        }
        TapeOp::LogSoftmax { out, x, .. } => {
            if x.requires_grad() {
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let yd = out.data();
                let mut dx = vec![T::zero(); n * c];
                for row in 0..n {
                    let mut gsum = T::zero();
                    for col in 0..c {
                        gsum = gsum + g_out[row * c + col];
                    }
                    for col in 0..c {
                        let i = row * c + col;
                        dx[i] = g_out[i] - yd[i].exp() * gsum;
                    }
                }
                drop(yd);
                x.accumulate_grad(&dx);
            }
        }
        TapeOp::BilinearResize { x, out } => {
            if x.requires_grad() {
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let full = CropParams::full(h, w);
                let mut dx = vec![T::zero(); x.numel()];
                for img in 0..x.shape()[0] {
                    resize::backward_rect(
                        &g_out[img * c * oh * ow..(img + 1) * c * oh * ow],
                        c,
                        h,
                        w,
                        &full,
                        oh,
                        ow,
                        &mut dx[img * c * h * w..(img + 1) * c * h * w],
                    );
                }
                x.accumulate_grad(&dx);
            }
        }
        TapeOp::CropResize { x, out, params } => {
            if x.requires_grad() {
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let mut dx = vec![T::zero(); x.numel()];
                for (img, p) in params.iter().enumerate() {
                    resize::backward_rect(
                        &g_out[img * c * oh * ow..(img + 1) * c * oh * ow],
                        c,
                        h,
                        w,
                        p,
                        oh,
                        ow,
                        &mut dx[img * c * h * w..(img + 1) * c * h * w],
                    );
                }
                x.accumulate_grad(&dx);
            }
        }
        TapeOp::Crop { x, out, top, left } => {
            if x.requires_grad() {
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (ch, cw) = (out.shape()[2], out.shape()[3]);
                let planes = x.shape()[0] * x.shape()[1];
                let mut dx = vec![T::zero(); x.numel()];
                for img in 0..planes {
                    let g = &g_out[img * ch * cw..(img + 1) * ch * cw];
                    let d = &mut dx[img * h * w..(img + 1) * h * w];
                    for y in 0..ch {
                        let s = (top + y) * w + left;
                        d[s..s + cw].copy_from_slice(&g[y * cw..(y + 1) * cw]);
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        TapeOp::Pad { x, out, pad } => {
            if x.requires_grad() {
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let planes = x.shape()[0] * x.shape()[1];
                let mut dx = vec![T::zero(); x.numel()];
                for img in 0..planes {
                    let g = &g_out[img * oh * ow..(img + 1) * oh * ow];
                    let d = &mut dx[img * h * w..(img + 1) * h * w];
                    for y in 0..h {
                        let s = (y + pad) * ow + pad;
                        d[y * w..(y + 1) * w].copy_from_slice(&g[s..s + w]);
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        TapeOp::Sum { x, .. } => {
            if x.requires_grad() {
                let dx = vec![g_out[0]; x.numel()];
                x.accumulate_grad(&dx);
            }
        }
        TapeOp::MeanAll { x, .. } => {
            if x.requires_grad() {
                let gv = g_out[0] / T::from_f64(x.numel() as f64);
                let dx = vec![gv; x.numel()];
                x.accumulate_grad(&dx);
            }
        }
        TapeOp::L2Norm { x, out } => {
            if x.requires_grad() {
                let y = out.item();
                let dx: Vec<T> = if y > T::zero() {
                    let coef = g_out[0] / y;
                    x.data().iter().map(|&v| coef * v).collect()
                } else {
                    vec![T::zero(); x.numel()]
                };
                x.accumulate_grad(&dx);
            }
        }
    }
}

fn backward_normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    g_out: &[T],
) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * w;
    let (xd, md, vd, gd) = (x.data(), mean.data(), var.data(), gamma.data());
    // Per-channel reductions of the output gradient, shared by every input.
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gxc = vec![T::zero(); c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let m = md[ch];
            let mut a = T::zero();
            let mut b = T::zero();
            for i in base..base + plane {
                a = a + g_out[i];
                b = b + g_out[i] * (xd[i] - m);
            }
            sum_g[ch] = sum_g[ch] + a;
            sum_gxc[ch] = sum_gxc[ch] + b;
        }
    }
    let half = T::from_f64(0.5);
    if x.requires_grad() {
        let mut dx = vec![T::zero(); x.numel()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let coef = gd[ch] * (vd[ch] + eps).sqrt().recip();
                for i in base..base + plane {
                    dx[i] = g_out[i] * coef;
                }
            }
        }
        x.accumulate_grad(&dx);
    }
    if mean.requires_grad() {
        let mut dm = vec![T::zero(); c];
        for ch in 0..c {
            dm[ch] = T::zero() - gd[ch] * (vd[ch] + eps).sqrt().recip() * sum_g[ch];
        }
        mean.accumulate_grad(&dm);
    }
    if var.requires_grad() {
        let mut dv = vec![T::zero(); c];
        for ch in 0..c {
            let inv = (vd[ch] + eps).sqrt().recip();
            dv[ch] = T::zero() - half * gd[ch] * inv * inv * inv * sum_gxc[ch];
        }
        var.accumulate_grad(&dv);
    }
    if gamma.requires_grad() {
        let mut dg = vec![T::zero(); c];
        for ch in 0..c {
            dg[ch] = (vd[ch] + eps).sqrt().recip() * sum_gxc[ch];
        }
        gamma.accumulate_grad(&dg);
    }
    if beta.requires_grad() {
        beta.accumulate_grad(&sum_g);
    }
    drop((xd, md, vd, gd));
}
