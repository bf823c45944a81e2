//! Curriculum crop scheduling and the crop/flip/cutout transforms.
//!
//! The curriculum controls one number: the minimum crop fraction `alpha` used
//! by random resized cropping. Early in synthesis `alpha` is high (crops are
//! large, close to the whole image, easy to match); a scheduler lowers it
//! toward `lower` so later steps optimize small, hard views. `constant` keeps
//! `alpha = lower` for the whole run (the fixed-difficulty baseline) and
//! `reverse_step` runs the curriculum backwards (hard first), which exists so
//! the ordering itself can be ablated.

use alloc::string::String;
use alloc::vec::Vec;
// Float supplies ln/exp/cos on f64 in no_std builds; with std the inherent
// methods shadow it.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Invalid curriculum or transform arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentError {
    pub detail: String,
}

impl core::fmt::Display for AugmentError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "invalid augmentation config: {}", self.detail)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AugmentError {}

/// How the minimum crop fraction moves over synthesis steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    /// `upper` until the milestone, then `lower`.
    Step,
    /// Linear descent from `upper` to `lower` across the milestone window.
    Linear,
    /// Half-cosine descent from `upper` to `lower` across the milestone window.
    Cosine,
    /// `lower` for the whole run: no curriculum.
    Constant,
    /// `lower` until the milestone, then `upper`: the curriculum reversed.
    ReverseStep,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 5] = [
        SchedulerKind::Step,
        SchedulerKind::Linear,
        SchedulerKind::Cosine,
        SchedulerKind::Constant,
        SchedulerKind::ReverseStep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::Step => "step",
            SchedulerKind::Linear => "linear",
            SchedulerKind::Cosine => "cosine",
            SchedulerKind::Constant => "constant",
            SchedulerKind::ReverseStep => "reverse_step",
        }
    }
}

/// Curriculum for the minimum crop fraction over a synthesis run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub scheduler: SchedulerKind,
    /// Final (hardest) minimum crop fraction, `0 < lower <= upper`.
    pub lower: f64,
    /// Initial (easiest) minimum crop fraction, `<= 1`.
    pub upper: f64,
    /// Descent shape factor for linear/cosine.
    pub shape: f64,
    /// Fraction of total steps covered by the descent window.
    pub milestone: f64,
    /// Total synthesis steps `S`; step indices run `0..S`.
    pub total_steps: usize,
    /// Sample a horizontal flip with probability 0.5 for each crop.
    pub flip: bool,
}

impl CurriculumConfig {
    /// Paper-default curriculum: cosine descent over the whole run.
    pub fn defaults(total_steps: usize) -> Self {
        CurriculumConfig {
            scheduler: SchedulerKind::Cosine,
            lower: 0.08,
            upper: 1.0,
            shape: 0.92,
            milestone: 1.0,
            total_steps,
            flip: false,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.lower > 0.0 && self.lower <= self.upper && self.upper <= 1.0) {
            return Err(AugmentError {
                detail: alloc::format!(
                    "crop bounds must satisfy 0 < lower <= upper <= 1, got ({}, {})",
                    self.lower,
                    self.upper
                ),
            });
        }
        if !(self.shape >= 0.0 && self.shape.is_finite()) {
            return Err(AugmentError {
                detail: alloc::format!("shape factor must be finite and >= 0, got {}", self.shape),
            });
        }
        if !(0.0..=1.0).contains(&self.milestone) {
            return Err(AugmentError {
                detail: alloc::format!("milestone must lie in [0, 1], got {}", self.milestone),
            });
        }
        if self.total_steps == 0 {
            return Err(AugmentError {
                detail: String::from("total_steps must be >= 1"),
            });
        }
        Ok(())
    }
}

/// Minimum crop fraction at step `step` (`0 <= step < total_steps`).
///
/// The milestone splits the run at `t = milestone * total_steps`. Inside the
/// window the kind's curve applies; past it, `step`/`linear`/`cosine` hold at
/// `lower` and `reverse_step` jumps to `upper`. A zero-length window means the
/// whole run is post-milestone. Results clamp into `[lower, upper]`.
pub fn min_crop_at(cfg: &CurriculumConfig, step: usize) -> f64 {
    let s = step as f64;
    let t = cfg.milestone * cfg.total_steps as f64;
    let pre_milestone = t > 0.0 && s <= t;
    let raw = match cfg.scheduler {
        SchedulerKind::Constant => cfg.lower,
        SchedulerKind::Step => {
            if pre_milestone {
                cfg.upper
            } else {
                cfg.lower
            }
        }
        SchedulerKind::ReverseStep => {
            if pre_milestone {
                cfg.lower
            } else {
                cfg.upper
            }
        }
        SchedulerKind::Linear => {
            if pre_milestone {
                cfg.lower + cfg.shape * (cfg.upper - s / t)
            } else {
                cfg.lower
            }
        }
        SchedulerKind::Cosine => {
            if pre_milestone {
                cfg.lower + cfg.shape * (cfg.upper + (core::f64::consts::PI * s / t).cos()) / 2.0
            } else {
                cfg.lower
            }
        }
    };
    raw.clamp(cfg.lower, cfg.upper)
}

/// Full `(step, alpha)` curve of a curriculum, for reports.
pub fn schedule_curve(cfg: &CurriculumConfig) -> Vec<(usize, f64)> {
    (0..cfg.total_steps).map(|s| (s, min_crop_at(cfg, s))).collect()
}

/// Crop sampling bounds for a fixed-difficulty (non-curriculum) run: the
/// chosen `alpha` becomes the lower area fraction against `upper`.
pub fn ctl_bounds(alpha: f64, upper: f64) -> Result<(f64, f64), AugmentError> {
    if !(alpha > 0.0 && alpha <= upper && upper <= 1.0) {
        return Err(AugmentError {
            detail: alloc::format!(
                "fixed alpha must satisfy 0 < alpha <= upper <= 1, got alpha={alpha}, upper={upper}"
            ),
        });
    }
    Ok((alpha, upper))
}

/// Multi-step decay helper (programmatic alternative to the scheduler kinds):
/// `alpha = upper * gamma^k` clamped into `[lower, upper]`, where `k` counts
/// milestones (fractions of `total_steps`) already passed at `step`.
pub fn multi_step_alpha(
    lower: f64,
    upper: f64,
    gamma: f64,
    milestones: &[f64],
    step: usize,
    total_steps: usize,
) -> f64 {
    let s = step as f64;
    let k = milestones
        .iter()
        .filter(|m| **m * total_steps as f64 <= s)
        .count() as i32;
    (upper * gamma.powi(k)).clamp(lower, upper)
}

/// One sampled augmented view: a crop rectangle in source pixel coordinates
/// plus a horizontal-flip flag. Rectangles are always fully inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropParams {
    pub top: u32,
    pub left: u32,
    pub height: u32,
    pub width: u32,
    pub flip: bool,
}

impl CropParams {
    /// The whole image, unflipped.
    pub fn full(height: usize, width: usize) -> Self {
        CropParams {
            top: 0,
            left: 0,
            height: height as u32,
            width: width as u32,
            flip: false,
        }
    }

    pub fn area(&self) -> u64 {
        self.height as u64 * self.width as u64
    }
}

/// Random resized crop sampling. Draws up to 10 candidate rectangles with
/// area uniform in `[alpha_min, alpha_max] * H * W` and aspect ratio
/// log-uniform in `(3/4, 4/3)`; the first candidate that fits inside the
/// image (and still respects the area bounds after integer rounding) wins.
/// If all attempts fail, falls back to a centered crop with both sides scaled
/// by `sqrt(alpha_max)`, which keeps the area at most `alpha_max * H * W`.
pub fn sample_crop<R: Rng + ?Sized>(
    rng: &mut R,
    img_h: usize,
    img_w: usize,
    alpha_min: f64,
    alpha_max: f64,
    flip_enabled: bool,
) -> CropParams {
    debug_assert!(img_h > 0 && img_w > 0);
    debug_assert!(alpha_min > 0.0 && alpha_min <= alpha_max && alpha_max <= 1.0);
    let area = (img_h * img_w) as f64;
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let mut rect = None;
    for _ in 0..10 {
        let target = area * rng.random_range(alpha_min..=alpha_max);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * ratio).sqrt().round();
        let h = (target / ratio).sqrt().round();
        if w < 1.0 || h < 1.0 || w > img_w as f64 || h > img_h as f64 {
            continue;
        }
        let (w, h) = (w as usize, h as usize);
        let rounded = (w * h) as f64;
        if rounded < alpha_min * area || rounded > alpha_max * area {
            continue;
        }
        let top = rng.random_range(0..=(img_h - h));
        let left = rng.random_range(0..=(img_w - w));
        rect = Some((top, left, h, w));
        break;
    }
    let (top, left, h, w) = rect.unwrap_or_else(|| {
        let s = alpha_max.sqrt();
        let h = ((img_h as f64 * s).floor() as usize).clamp(1, img_h);
        let w = ((img_w as f64 * s).floor() as usize).clamp(1, img_w);
        ((img_h - h) / 2, (img_w - w) / 2, h, w)
    });
    let flip = flip_enabled && rng.random_bool(0.5);
    CropParams {
        top: top as u32,
        left: left as u32,
        height: h as u32,
        width: w as u32,
        flip,
    }
}

/// Crop sampler driven by a curriculum at a given step.
pub fn sample_curriculum_crop<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &CurriculumConfig,
    step: usize,
    img_h: usize,
    img_w: usize,
) -> CropParams {
    let alpha = min_crop_at(cfg, step);
    sample_crop(rng, img_h, img_w, alpha, cfg.upper, cfg.flip)
}

/// Write an optimized crop view back into its source rectangle: the view is
/// bilinearly resized to (params.height, params.width), unflipped if the
/// forward crop flipped, and copied into the rectangle of `full`. Pixels
/// outside the rectangle are untouched. With an unmodified view and matching
/// sizes this inverts the crop-resize exactly.
pub fn reverse_paste<T: Scalar>(
    full: &mut [T],
    channels: usize,
    height: usize,
    width: usize,
    view: &[T],
    view_h: usize,
    view_w: usize,
    params: &CropParams,
) {
    debug_assert_eq!(full.len(), channels * height * width);
    debug_assert_eq!(view.len(), channels * view_h * view_w);
    debug_assert!((params.top + params.height) as usize <= height);
    debug_assert!((params.left + params.width) as usize <= width);
    let (ph, pw) = (params.height as usize, params.width as usize);
    // Flipping the resample output equals resampling the unflipped view, so
    // the render path inverts its own flip.
    let whole_view = CropParams {
        top: 0,
        left: 0,
        height: view_h as u32,
        width: view_w as u32,
        flip: params.flip,
    };
    let mut patch = alloc::vec![T::zero(); channels * ph * pw];
    crate::ops::resize_view_raw(view, channels, view_h, view_w, &whole_view, ph, pw, &mut patch);
    for c in 0..channels {
        for y in 0..ph {
            let dst = (c * height + params.top as usize + y) * width + params.left as usize;
            let src = (c * ph + y) * pw;
            full[dst..dst + pw].copy_from_slice(&patch[src..src + pw]);
        }
    }
}

/// In-place horizontal flip of a CHW image buffer.
pub fn flip_horizontal<T: Scalar>(pixels: &mut [T], channels: usize, height: usize, width: usize) {
    debug_assert_eq!(pixels.len(), channels * height * width);
    for c in 0..channels {
        for y in 0..height {
            let row = (c * height + y) * width;
            pixels[row..row + width].reverse();
        }
    }
}

/// Cutout: overwrite a square patch (side `frac * min(H, W)`, center uniform
/// over the image, clipped at borders) with one random color per channel.
/// Operates on [0, 1]-range pixels before normalization.
pub fn cutout<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    pixels: &mut [T],
    channels: usize,
    height: usize,
    width: usize,
    frac: f64,
) {
    debug_assert_eq!(pixels.len(), channels * height * width);
    if frac <= 0.0 {
        return;
    }
    let side = (frac * height.min(width) as f64).round() as isize;
    if side < 1 {
        return;
    }
    let cy = rng.random_range(0..height) as isize;
    let cx = rng.random_range(0..width) as isize;
    let y0 = (cy - side / 2).max(0) as usize;
    let y1 = ((cy + (side + 1) / 2).min(height as isize)) as usize;
    let x0 = (cx - side / 2).max(0) as usize;
    let x1 = ((cx + (side + 1) / 2).min(width as isize)) as usize;
    for c in 0..channels {
        let fill = T::from_f64(rng.random_range(0.0..1.0));
        for y in y0..y1 {
            let row = (c * height + y) * width;
            for x in x0..x1 {
                pixels[row + x] = fill;
            }
        }
    }
}
