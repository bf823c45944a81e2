//! Bilinear sampling of an axis-aligned source rectangle, plus its exact
//! transpose for the backward pass.
//!
//! Sampling uses the half-pixel-center convention: output pixel `i` reads
//! source coordinate `start + (i + 0.5) * len / out - 0.5`. Interpolation is
//! computed in lerp form `a + f * (b - a)`, so a constant image is preserved
//! exactly and resizing a rect to its own size is an exact identity. Sample
//! indices clamp to the rectangle, never the full image, so crops take zero
//! gradient from pixels outside their rect.

use alloc::vec::Vec;

// Float supplies floor on f64 in no_std builds; with std the inherent
// methods shadow it.
#[allow(unused_imports)]
use num_traits::Float;

use crate::augment::CropParams;
use crate::scalar::Scalar;

/// Per-output-pixel sample plan along one axis: two clamped source indices
/// and the interpolation fraction between them.
fn axis_table(start: usize, len: usize, out: usize) -> Vec<(usize, usize, f64)> {
    debug_assert!(len >= 1 && out >= 1);
    let scale = len as f64 / out as f64;
    let lo = start as f64;
    let hi = (start + len - 1) as f64;
    (0..out)
        .map(|i| {
            let src = lo + (i as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let f = src - base;
            let i0 = base.clamp(lo, hi) as usize;
            let i1 = (base + 1.0).clamp(lo, hi) as usize;
            (i0, i1, f)
        })
        .collect()
}

/// Sample `src` (one CHW image) over the rect in `p` into `dst`
/// (`c * out_h * out_w`), honouring the horizontal-flip flag.
#[allow(clippy::too_many_arguments)]
pub(super) fn forward_rect<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    p: &CropParams,
    out_h: usize,
    out_w: usize,
    dst: &mut [T],
) {
    let ytab = axis_table(p.top as usize, p.height as usize, out_h);
    let xtab = axis_table(p.left as usize, p.width as usize, out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let out_plane = &mut dst[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ytab.iter().enumerate() {
            let fy = T::from_f64(fy);
            let row0 = &plane[y0 * w..y0 * w + w];
            let row1 = &plane[y1 * w..y1 * w + w];
            let out_row = &mut out_plane[oy * out_w..(oy + 1) * out_w];
            for ox in 0..out_w {
                let tx = if p.flip { out_w - 1 - ox } else { ox };
                let (x0, x1, fx) = xtab[tx];
                let fx = T::from_f64(fx);
                let top = row0[x0] + fx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                out_row[ox] = top + fy * (bot - top);
            }
        }
    }
}

/// Transpose of [`forward_rect`]: scatter the output gradient back onto the
/// source gradient (adds into `dx`).
#[allow(clippy::too_many_arguments)]
pub(super) fn backward_rect<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    p: &CropParams,
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    let ytab = axis_table(p.top as usize, p.height as usize, out_h);
    let xtab = axis_table(p.left as usize, p.width as usize, out_w);
    let one = T::one();
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let g_plane = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ytab.iter().enumerate() {
            let fy = T::from_f64(fy);
            for ox in 0..out_w {
                let tx = if p.flip { out_w - 1 - ox } else { ox };
                let (x0, x1, fx) = xtab[tx];
                let fx = T::from_f64(fx);
                let gv = g_plane[oy * out_w + ox];
                plane[y0 * w + x0] = plane[y0 * w + x0] + gv * (one - fy) * (one - fx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + gv * (one - fy) * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + gv * fy * (one - fx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + gv * fy * fx;
            }
        }
    }
}

/// Tape-free view rendering for relabel/post-train: crop + bilinear resize +
/// flip of one CHW image into `dst` (`c * out_h * out_w` elements). Exactly
/// the forward computation of the differentiable crop-resize.
#[allow(clippy::too_many_arguments)]
pub fn resize_view_raw<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    p: &CropParams,
    out_h: usize,
    out_w: usize,
    dst: &mut [T],
) {
    debug_assert_eq!(src.len(), c * h * w);
    debug_assert_eq!(dst.len(), c * out_h * out_w);
    debug_assert!((p.top + p.height) as usize <= h && (p.left + p.width) as usize <= w);
    forward_rect(src, c, h, w, p, out_h, out_w, dst);
}
