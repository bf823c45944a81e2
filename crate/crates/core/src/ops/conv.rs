//! Convolution kernels: im2col + GEMM per image, col2im for the input
//! gradient, and accumulated GEMMs for the weight gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Unfold one CHW image into a `(C*KH*KW, OH*OW)` row-major patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let z = T::zero();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(z);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            z
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto a CHW image gradient (adds).
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &col[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &g) in src_row.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let i = iy as usize * w + ix as usize;
                            plane[i] = plane[i] + g;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let mut out = vec![T::zero(); n * oc * ohw];
    let mut col = vec![T::zero(); ckk * ohw];
    for img in 0..n {
        im2col(&x[img * c * h * w..(img + 1) * c * h * w], c, h, w, kh, kw, stride, pad, oh, ow, &mut col);
        T::gemm(
            oc,
            ckk,
            ohw,
            T::one(),
            wgt,
            (ckk as isize, 1),
            &col,
            (ohw as isize, 1),
            T::zero(),
            &mut out[img * oc * ohw..(img + 1) * oc * ohw],
            (ohw as isize, 1),
        );
    }
    out
}

/// Input and weight gradients. The patch matrix is recomputed per image
/// instead of being cached from the forward pass, trading FLOPs for memory.
pub(super) fn backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    out_shape: &[usize],
    g_out: &[T],
    stride: usize,
    pad: usize,
) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let need_dx = x.requires_grad();
    let need_dw = w.requires_grad();
    let mut dx = if need_dx { vec![T::zero(); x.numel()] } else { Vec::new() };
    let mut dw = if need_dw { vec![T::zero(); w.numel()] } else { Vec::new() };
    let mut col = vec![T::zero(); ckk * ohw];
    let xd = x.data();
    let wd_data = w.data();
    for img in 0..n {
        let g_img = &g_out[img * oc * ohw..(img + 1) * oc * ohw];
        if need_dw {
            im2col(&xd[img * c * h * wd..(img + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, oh, ow, &mut col);
            // dW += g_img (OC,OHW) @ col^T (OHW,CKK), accumulated over images.
            T::gemm(
                oc,
                ohw,
                ckk,
                T::one(),
                g_img,
                (ohw as isize, 1),
                &col,
                (1, ohw as isize),
                T::one(),
                &mut dw,
                (ckk as isize, 1),
            );
        }
        if need_dx {
            // col gradient = W^T (CKK,OC) @ g_img (OC,OHW), then fold back.
            T::gemm(
                ckk,
                oc,
                ohw,
                T::one(),
                &wd_data,
                (1, ckk as isize),
                g_img,
                (ohw as isize, 1),
                T::zero(),
                &mut col,
                (ohw as isize, 1),
            );
            col2im_add(&col, c, h, wd, kh, kw, stride, pad, oh, ow, &mut dx[img * c * h * wd..(img + 1) * c * h * wd]);
        }
    }
    drop(xd);
    drop(wd_data);
    if need_dx {
        x.accumulate_grad(&dx);
    }
    if need_dw {
        w.accumulate_grad(&dw);
    }
}
