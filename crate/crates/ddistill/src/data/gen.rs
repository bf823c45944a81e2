//! Procedural desk-scale datasets written through the real on-disk formats
//! (IDX for the grayscale corpus, CIFAR binary for the color ones).
//!
//! Class identity is carried by local structure (stroke layout, texture
//! frequency and orientation, palette) while position, size, lighting, and
//! noise vary per instance, so multi-scale crops of an image stay
//! class-informative. Difficulty rises from the glyph corpus (well-separated
//! templates) through the 10-class color corpus (shared shape families,
//! distinct textures) to the 100-class corpus (fine-grained shape x texture
//! grid).

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use ddistill_core::rng::{purpose, stream_rng};

use super::cifar::{write_cifar_binary, CifarVariant, CIFAR_EDGE};
use super::idx::{write_idx_images, write_idx_labels};
use crate::error::{Result, ToolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratedKind {
    MnistLike,
    Cifar10Like,
    Cifar100Like,
}

impl GeneratedKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist-like" => Ok(GeneratedKind::MnistLike),
            "cifar10-like" => Ok(GeneratedKind::Cifar10Like),
            "cifar100-like" => Ok(GeneratedKind::Cifar100Like),
            other => Err(ToolError::validation(format!(
                "unknown dataset kind {other:?} (mnist-like, cifar10-like, cifar100-like)"
            ))),
        }
    }

    pub fn classes(self) -> usize {
        match self {
            GeneratedKind::MnistLike | GeneratedKind::Cifar10Like => 10,
            GeneratedKind::Cifar100Like => 100,
        }
    }

    pub fn default_train_per_class(self) -> usize {
        match self {
            GeneratedKind::MnistLike => 600,
            GeneratedKind::Cifar10Like => 1000,
            GeneratedKind::Cifar100Like => 120,
        }
    }

    pub fn default_val_per_class(self) -> usize {
        match self {
            GeneratedKind::MnistLike => 150,
            GeneratedKind::Cifar10Like => 200,
            GeneratedKind::Cifar100Like => 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub kind: GeneratedKind,
    pub seed: u64,
    pub train_per_class: usize,
    pub val_per_class: usize,
}

impl GeneratorParams {
    pub fn new(kind: GeneratedKind, seed: u64) -> Self {
        GeneratorParams {
            kind,
            seed,
            train_per_class: kind.default_train_per_class(),
            val_per_class: kind.default_val_per_class(),
        }
    }
}

/// Generate both splits of `params.kind` under `dir` using the standard
/// filenames the loaders expect. Returns (train count, val count).
pub fn generate(dir: &Path, params: &GeneratorParams) -> Result<(usize, usize)> {
    if params.train_per_class == 0 || params.val_per_class == 0 {
        return Err(ToolError::validation("per-class counts must be >= 1"));
    }
    std::fs::create_dir_all(dir)?;
    match params.kind {
        GeneratedKind::MnistLike => {
            let (ti, tl) = render_glyph_split(params, 0, params.train_per_class);
            let (vi, vl) = render_glyph_split(params, 1, params.val_per_class);
            write_idx_images(&dir.join("train-images-idx3-ubyte"), &ti, 28, 28)?;
            write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &tl)?;
            write_idx_images(&dir.join("val-images-idx3-ubyte"), &vi, 28, 28)?;
            write_idx_labels(&dir.join("val-labels-idx1-ubyte"), &vl)?;
            Ok((tl.len(), vl.len()))
        }
        GeneratedKind::Cifar10Like | GeneratedKind::Cifar100Like => {
            let variant = if params.kind == GeneratedKind::Cifar10Like {
                CifarVariant::C10
            } else {
                CifarVariant::C100
            };
            let (ti, tl) = render_color_split(params, 0, params.train_per_class);
            let (vi, vl) = render_color_split(params, 1, params.val_per_class);
            write_cifar_binary(&dir.join("train.bin"), &ti, &tl, variant)?;
            write_cifar_binary(&dir.join("val.bin"), &vi, &vl, variant)?;
            Ok((tl.len(), vl.len()))
        }
    }
}

fn image_rng(seed: u64, split: u64, index: usize) -> impl Rng {
    stream_rng(seed, purpose::GENERATOR, (split << 24) | index as u64)
}

fn normal(rng: &mut impl Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

// ---- glyph corpus (IDX, 1x28x28, 10 classes) ----

const GLYPH_EDGE: usize = 28;

struct Segment {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    thick: f64,
}

/// Class templates: 4-6 strokes with seeded endpoints. Template identity
/// depends only on the dataset seed and class id.
fn glyph_template(seed: u64, class: usize) -> Vec<Segment> {
    let mut rng = stream_rng(seed, purpose::GENERATOR, (1 << 40) | class as u64);
    let count = rng.random_range(4..=6);
    let mut segs = Vec::with_capacity(count);
    // Chain the strokes so glyphs are connected, like handwriting.
    let mut x = rng.random_range(7.0..21.0);
    let mut y = rng.random_range(7.0..21.0);
    for _ in 0..count {
        let nx = rng.random_range(5.0..23.0);
        let ny = rng.random_range(5.0..23.0);
        segs.push(Segment {
            x0: x,
            y0: y,
            x1: nx,
            y1: ny,
            thick: rng.random_range(1.1..1.9),
        });
        x = nx;
        y = ny;
    }
    segs
}

fn segment_intensity(s: &Segment, x: f64, y: f64) -> f64 {
    let (dx, dy) = (s.x1 - s.x0, s.y1 - s.y0);
    let len2 = (dx * dx + dy * dy).max(1e-9);
    let t = ((x - s.x0) * dx + (y - s.y0) * dy) / len2;
    let t = t.clamp(0.0, 1.0);
    let (px, py) = (s.x0 + t * dx, s.y0 + t * dy);
    let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
    // Soft-edged stroke: full intensity inside, linear falloff over 0.8 px.
    ((s.thick - d) / 0.8 + 1.0).clamp(0.0, 1.0)
}

fn render_glyph_split(params: &GeneratorParams, split: u64, per_class: usize) -> (Vec<f32>, Vec<u32>) {
    let classes = params.kind.classes();
    let templates: Vec<Vec<Segment>> =
        (0..classes).map(|k| glyph_template(params.seed, k)).collect();
    let n = per_class * classes;
    let mut images = Vec::with_capacity(n * GLYPH_EDGE * GLYPH_EDGE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let mut rng = image_rng(params.seed, split, i);
        let dx = rng.random_range(-2.5..2.5);
        let dy = rng.random_range(-2.5..2.5);
        let scale = rng.random_range(0.85..1.15);
        let gain = rng.random_range(0.75..1.0);
        let noise = 0.08;
        let c = GLYPH_EDGE as f64 / 2.0;
        for py in 0..GLYPH_EDGE {
            for px in 0..GLYPH_EDGE {
                // Map the output pixel back into template coordinates.
                let tx = (px as f64 - c - dx) / scale + c;
                let ty = (py as f64 - c - dy) / scale + c;
                let ink: f64 = templates[class]
                    .iter()
                    .map(|s| segment_intensity(s, tx, ty))
                    .fold(0.0, f64::max);
                let v = gain * ink + noise * normal(&mut rng);
                images.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(class as u32);
    }
    (images, labels)
}

// ---- color corpora (CIFAR binary, 3x32x32, 10 or 100 classes) ----

#[derive(Clone, Copy)]
enum ShapeFamily {
    Disc,
    Ring,
    Bar,
    Cross,
    Square,
}

impl ShapeFamily {
    fn of(index: usize) -> Self {
        match index % 5 {
            0 => ShapeFamily::Disc,
            1 => ShapeFamily::Ring,
            2 => ShapeFamily::Bar,
            3 => ShapeFamily::Cross,
            _ => ShapeFamily::Square,
        }
    }

    /// Coverage in object coordinates (u, v already rotated, unit = object
    /// radius), soft-edged in [0, 1].
    fn mask(self, u: f64, v: f64) -> f64 {
        let soft = |d: f64| (-d / 0.12 + 1.0).clamp(0.0, 1.0);
        let r = (u * u + v * v).sqrt();
        match self {
            ShapeFamily::Disc => soft(r - 1.0),
            ShapeFamily::Ring => soft((r - 0.75).abs() - 0.3),
            ShapeFamily::Bar => soft(u.abs() - 1.0).min(soft(v.abs() - 0.38)),
            ShapeFamily::Cross => soft(u.abs() - 1.0)
                .min(soft(v.abs() - 0.3))
                .max(soft(v.abs() - 1.0).min(soft(u.abs() - 0.3))),
            ShapeFamily::Square => soft(u.abs().max(v.abs()) - 0.85),
        }
    }
}

/// Fixed per-class appearance. Color carries no class signal at all: the
/// class lives in the shape family and the stripe texture measured in
/// object-local units, so it survives crops at many scales but cannot be
/// read off global statistics.
struct ClassStyle {
    shape: ShapeFamily,
    stripe_freq: f64,
    /// Crosshatch angle relative to the primary stripes; only the 100-class
    /// grid uses it.
    second_angle: f64,
    /// 0 disables the crosshatch.
    second_weight: f64,
}

const FREQ_BANDS: [f64; 2] = [2.6, 5.2];
const CROSSHATCH_FREQ: f64 = 3.2;

fn class_style(kind: GeneratedKind, class: usize) -> ClassStyle {
    match kind {
        GeneratedKind::Cifar10Like => ClassStyle {
            // Classes k and k+5 share a shape family; the stripe frequency
            // band separates them.
            shape: ShapeFamily::of(class),
            stripe_freq: FREQ_BANDS[class / 5],
            second_angle: 0.0,
            second_weight: 0.0,
        },
        GeneratedKind::Cifar100Like => {
            // 10 coarse groups (shape x frequency band) x 10 fine texture
            // variants (crosshatch angle x crosshatch strength).
            let group = class / 10;
            let tex = class % 10;
            ClassStyle {
                shape: ShapeFamily::of(group % 5),
                stripe_freq: FREQ_BANDS[group / 5],
                // Offset keeps every crosshatch visibly distinct from the
                // primary stripe direction.
                second_angle: std::f64::consts::PI / 10.0
                    + std::f64::consts::PI / 5.0 * (tex % 5) as f64,
                second_weight: [0.35, 0.9][tex / 5],
            }
        }
        GeneratedKind::MnistLike => unreachable!("glyph corpus renders separately"),
    }
}

/// Hue in [0,1) to RGB at fixed saturation/value.
fn hue_rgb(h: f64, sat: f64, val: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let f = h6 - h6.floor();
    let p = val * (1.0 - sat);
    let q = val * (1.0 - sat * f);
    let t = val * (1.0 - sat * (1.0 - f));
    match h6 as usize % 6 {
        0 => [val, t, p],
        1 => [q, val, p],
        2 => [p, val, t],
        3 => [p, q, val],
        4 => [t, p, val],
        _ => [val, p, q],
    }
}

fn render_color_split(params: &GeneratorParams, split: u64, per_class: usize) -> (Vec<f32>, Vec<u32>) {
    let classes = params.kind.classes();
    let styles: Vec<ClassStyle> = (0..classes).map(|k| class_style(params.kind, k)).collect();
    // The 100-class grid is only learnable if per-instance corruption stays
    // below the fine-grained style differences.
    let noise = match params.kind {
        GeneratedKind::Cifar10Like => 0.12,
        _ => 0.08,
    };
    let edge = CIFAR_EDGE;
    let n = per_class * classes;
    let mut images = Vec::with_capacity(n * 3 * edge * edge);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let style = &styles[class];
        let mut rng = image_rng(params.seed, split, i);

        let radius = rng.random_range(7.0..10.0);
        let cx = rng.random_range(radius..edge as f64 - radius);
        let cy = rng.random_range(radius..edge as f64 - radius);
        let orient = rng.random_range(0.0..std::f64::consts::PI);
        let stripe_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let second_phase = rng.random_range(0.0..std::f64::consts::TAU);
        // Palette is nuisance: any foreground hue, background offset far
        // enough around the wheel to keep the figure visible, darker and
        // duller than the object.
        let fg_hue = rng.random_range(0.0..1.0);
        let bg_hue = (fg_hue + rng.random_range(0.25..0.75)) % 1.0;
        let fg = hue_rgb(fg_hue, rng.random_range(0.6..0.95), rng.random_range(0.75..1.0));
        let fg_dark = [fg[0] * 0.2, fg[1] * 0.2, fg[2] * 0.2];
        let bg = hue_rgb(bg_hue, rng.random_range(0.2..0.5), rng.random_range(0.25..0.5));
        // Lighting gradient across the frame.
        let lx = rng.random_range(-0.15..0.15) / edge as f64;
        let ly = rng.random_range(-0.15..0.15) / edge as f64;
        let gain = rng.random_range(0.85..1.1);
        // A dim striped distractor blob behind the object, textured from a
        // random band so tiny crops can land on misleading texture.
        let distract = if rng.random_range(0.0..1.0) < 0.45 {
            Some((
                rng.random_range(4.0..edge as f64 - 4.0),
                rng.random_range(4.0..edge as f64 - 4.0),
                rng.random_range(2.0..3.5),
                FREQ_BANDS[rng.random_range(0..2usize)],
                hue_rgb(rng.random_range(0.0..1.0), 0.5, 0.55),
                rng.random_range(0.0..std::f64::consts::TAU),
            ))
        } else {
            None
        };

        let (sin_o, cos_o) = orient.sin_cos();
        let (sin_d, cos_d) = style.second_angle.sin_cos();
        let mut pixel = vec![[0.0f64; 3]; edge * edge];
        for py in 0..edge {
            for px in 0..edge {
                let x = px as f64 - cx;
                let y = py as f64 - cy;
                let u = (x * cos_o + y * sin_o) / radius;
                let v = (-x * sin_o + y * cos_o) / radius;
                let m = style.shape.mask(u, v);
                let light = gain * (1.0 + lx * x + ly * y);
                let p = &mut pixel[py * edge + px];
                let mut base = bg;
                if let Some((dx, dy, dr, df, dc, dp)) = distract {
                    let du = (px as f64 - dx) / dr;
                    let dv = (py as f64 - dy) / dr;
                    let dm = 0.35 * ShapeFamily::Disc.mask(du, dv);
                    let ds = 0.5 + 0.5 * (df * std::f64::consts::PI * du + dp).sin();
                    for ch in 0..3 {
                        base[ch] = base[ch] * (1.0 - dm) + dc[ch] * ds * dm;
                    }
                }
                // Two-tone stripes in object-local units carry the class
                // signal at every crop scale; the optional crosshatch is the
                // fine-grained axis of the 100-class grid.
                let s1 = 0.5
                    + 0.5 * (style.stripe_freq * std::f64::consts::PI * u + stripe_phase).sin();
                let stripe = if style.second_weight > 0.0 {
                    let along2 = u * cos_d + v * sin_d;
                    // Fixed mid frequency keeps the crosshatch resolvable no
                    // matter which band the primary stripes use.
                    let s2 = 0.5
                        + 0.5 * (CROSSHATCH_FREQ * std::f64::consts::PI * along2 + second_phase).sin();
                    s1 * (1.0 - style.second_weight + style.second_weight * s2)
                } else {
                    s1
                };
                for ch in 0..3 {
                    let obj = fg[ch] * stripe + fg_dark[ch] * (1.0 - stripe);
                    p[ch] = (base[ch] * (1.0 - m) + obj * m) * light;
                }
            }
        }
        // Channel-planar write-out with per-pixel noise.
        for ch in 0..3 {
            for p in pixel.iter() {
                let v = p[ch] + noise * normal(&mut rng);
                images.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(class as u32);
    }
    (images, labels)
}
