//! Curriculum schedule closed forms (frozen oracle values), crop sampling
//! guarantees, and the raw-buffer transforms.

use ddistill_core::augment::{
    ctl_bounds, cutout, flip_horizontal, min_crop_at, multi_step_alpha, reverse_paste,
    sample_crop, schedule_curve, CropParams, CurriculumConfig, SchedulerKind,
};
use ddistill_core::ops::resize_view_raw;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(scheduler: SchedulerKind, milestone: f64, total: usize) -> CurriculumConfig {
    CurriculumConfig { scheduler, milestone, total_steps: total, ..CurriculumConfig::defaults(total) }
}

fn assert_close(got: f64, want: f64) {
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn cosine_schedule_frozen_values() {
    let c = cfg(SchedulerKind::Cosine, 1.0, 1000);
    assert_close(min_crop_at(&c, 0), 1.0);
    assert_close(min_crop_at(&c, 250), 0.8652691193458119);
    assert_close(min_crop_at(&c, 500), 0.54);
    assert_close(min_crop_at(&c, 750), 0.21473088065418816);
    assert_close(min_crop_at(&c, 1000), 0.08);
    assert_close(min_crop_at(&c, 999), 0.08000227000714523);
}

#[test]
fn linear_schedule_frozen_values() {
    let c = cfg(SchedulerKind::Linear, 1.0, 1000);
    assert_close(min_crop_at(&c, 0), 1.0);
    assert_close(min_crop_at(&c, 250), 0.77);
    assert_close(min_crop_at(&c, 500), 0.54);
    assert_close(min_crop_at(&c, 750), 0.31);
    assert_close(min_crop_at(&c, 1000), 0.08);
    assert_close(min_crop_at(&c, 999), 0.08092);
}

#[test]
fn step_family_and_milestones() {
    let c = cfg(SchedulerKind::Step, 0.5, 1000);
    for s in [0, 125, 250, 375, 500] {
        assert_close(min_crop_at(&c, s), 1.0);
    }
    assert_close(min_crop_at(&c, 501), 0.08);
    assert_close(min_crop_at(&c, 999), 0.08);

    let r = cfg(SchedulerKind::ReverseStep, 0.5, 1000);
    for s in [0, 250, 500] {
        assert_close(min_crop_at(&r, s), 0.08);
    }
    assert_close(min_crop_at(&r, 501), 1.0);
    assert_close(min_crop_at(&r, 999), 1.0);

    let k = cfg(SchedulerKind::Constant, 0.5, 1000);
    for s in [0, 250, 500, 750, 999] {
        assert_close(min_crop_at(&k, s), 0.08);
    }
}

#[test]
fn raised_lower_bound_clamps_at_the_top() {
    // lower = 0.4 pushes the early cosine value past 1; it must clamp.
    let mut c = cfg(SchedulerKind::Cosine, 1.0, 1000);
    c.lower = 0.4;
    assert_close(min_crop_at(&c, 0), 1.0);
    assert_close(min_crop_at(&c, 500), 0.8600000000000001);
    assert_close(min_crop_at(&c, 1000), 0.4);
}

#[test]
fn zero_length_window_is_immediately_post_milestone() {
    for kind in [SchedulerKind::Step, SchedulerKind::Linear, SchedulerKind::Cosine] {
        let c = cfg(kind, 0.0, 100);
        for s in [0, 1, 50, 99] {
            assert_close(min_crop_at(&c, s), 0.08);
        }
    }
    let r = cfg(SchedulerKind::ReverseStep, 0.0, 100);
    assert_close(min_crop_at(&r, 0), 1.0);
    assert_close(min_crop_at(&r, 99), 1.0);
}

#[test]
fn schedule_stays_in_bounds_and_descends() {
    for kind in [SchedulerKind::Step, SchedulerKind::Linear, SchedulerKind::Cosine] {
        for milestone in [0.0, 0.25, 0.5, 1.0] {
            let c = cfg(kind, milestone, 777);
            let curve = schedule_curve(&c);
            assert_eq!(curve.len(), 777);
            let mut prev = f64::INFINITY;
            for (_, alpha) in curve {
                assert!((c.lower..=c.upper).contains(&alpha), "{alpha} out of bounds");
                assert!(alpha <= prev + 1e-12, "schedule increased: {prev} -> {alpha}");
                prev = alpha;
            }
        }
    }
}

#[test]
fn config_validation() {
    let mut c = CurriculumConfig::defaults(100);
    assert!(c.validate().is_ok());
    c.lower = 0.0;
    assert!(c.validate().is_err());
    c.lower = 0.5;
    c.upper = 0.4;
    assert!(c.validate().is_err());
    c.upper = 1.5;
    assert!(c.validate().is_err());
    c = CurriculumConfig::defaults(100);
    c.milestone = 1.2;
    assert!(c.validate().is_err());
    c = CurriculumConfig::defaults(0);
    assert!(c.validate().is_err());
    c = CurriculumConfig::defaults(100);
    c.shape = -0.1;
    assert!(c.validate().is_err());
}

#[test]
fn ctl_bounds_cases() {
    assert_eq!(ctl_bounds(0.4, 1.0).unwrap(), (0.4, 1.0));
    assert_eq!(ctl_bounds(1.0, 1.0).unwrap(), (1.0, 1.0));
    assert!(ctl_bounds(0.0, 1.0).is_err());
    assert!(ctl_bounds(0.5, 0.4).is_err());
    assert!(ctl_bounds(0.5, 1.1).is_err());
}

#[test]
fn multi_step_decay_helper() {
    let ms = [0.3, 0.6];
    assert_close(multi_step_alpha(0.2, 1.0, 0.5, &ms, 0, 100), 1.0);
    assert_close(multi_step_alpha(0.2, 1.0, 0.5, &ms, 29, 100), 1.0);
    assert_close(multi_step_alpha(0.2, 1.0, 0.5, &ms, 30, 100), 0.5);
    assert_close(multi_step_alpha(0.2, 1.0, 0.5, &ms, 60, 100), 0.25);
    // Clamped at the lower bound.
    assert_close(multi_step_alpha(0.3, 1.0, 0.5, &ms, 99, 100), 0.3);
}

#[test]
fn sampled_crops_always_fit_and_respect_area_bounds() {
    let (h, w) = (28, 36);
    let area = (h * w) as f64;
    for (lo, hi) in [(0.08f64, 1.0f64), (0.4, 1.0), (0.9, 0.95), (1.0, 1.0)] {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // The deterministic fallback rect for this config.
        let s = hi.sqrt();
        let fh = ((h as f64 * s).floor() as u32).clamp(1, h as u32);
        let fw = ((w as f64 * s).floor() as u32).clamp(1, w as u32);
        for _ in 0..10_000 {
            let p = sample_crop(&mut rng, h, w, lo, hi, false);
            assert!(p.height >= 1 && p.width >= 1);
            assert!((p.top + p.height) as usize <= h && (p.left + p.width) as usize <= w);
            let a = p.area() as f64;
            assert!(a <= hi * area + 1e-9, "area {a} above {}", hi * area);
            let is_fallback = p.height == fh && p.width == fw;
            if !is_fallback {
                assert!(a >= lo * area - 1e-9, "area {a} below {}", lo * area);
            }
            assert!(!p.flip);
        }
    }
}

#[test]
fn degenerate_bounds_give_the_full_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let p = sample_crop(&mut rng, 32, 32, 1.0, 1.0, false);
        assert_eq!((p.top, p.left, p.height, p.width), (0, 0, 32, 32));
    }
}

#[test]
fn crop_sampling_is_deterministic_and_flips_half_the_time() {
    let draw = |seed: u64| -> Vec<CropParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2000).map(|_| sample_crop(&mut rng, 32, 32, 0.08, 1.0, true)).collect()
    };
    let a = draw(9);
    let b = draw(9);
    assert_eq!(a, b);
    let c = draw(10);
    assert_ne!(a, c);
    let flips = a.iter().filter(|p| p.flip).count();
    assert!((800..=1200).contains(&flips), "flip count {flips}");
}

#[test]
fn flip_is_an_involution() {
    let mut img: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64).collect();
    let orig = img.clone();
    flip_horizontal(&mut img, 2, 3, 4);
    assert_ne!(img, orig);
    flip_horizontal(&mut img, 2, 3, 4);
    assert_eq!(img, orig);
}

#[test]
fn paste_back_of_an_unmodified_same_size_view_is_the_identity() {
    let (c, h, w) = (2usize, 9, 7);
    let image: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
    for flip in [false, true] {
        let p = CropParams { top: 2, left: 1, height: 4, width: 5, flip };
        let mut view = vec![0.0; c * 4 * 5];
        resize_view_raw(&image, c, h, w, &p, 4, 5, &mut view);
        let mut pasted = image.clone();
        reverse_paste(&mut pasted, c, h, w, &view, 4, 5, &p);
        assert_eq!(pasted, image, "flip={flip}");
    }
}

#[test]
fn paste_back_touches_only_the_crop_rectangle() {
    let (c, h, w) = (1usize, 8, 8);
    let image: Vec<f64> = (0..c * h * w).map(|i| i as f64).collect();
    let p = CropParams { top: 1, left: 2, height: 3, width: 4, flip: false };
    // An optimized view at a different resolution than the rect.
    let view: Vec<f64> = (0..c * 6 * 6).map(|i| -(i as f64)).collect();
    let mut pasted = image.clone();
    reverse_paste(&mut pasted, c, h, w, &view, 6, 6, &p);
    let mut changed = 0;
    for y in 0..h {
        for x in 0..w {
            let inside = (1..4).contains(&y) && (2..6).contains(&x);
            let idx = y * w + x;
            if inside {
                changed += usize::from(pasted[idx] != image[idx]);
            } else {
                assert_eq!(pasted[idx], image[idx], "outside pixel ({y},{x}) moved");
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn full_image_paste_replaces_everything_with_the_resized_view() {
    let (c, h, w) = (1usize, 5, 5);
    let mut image = vec![7.0f64; c * h * w];
    let view = vec![2.5f64; c * 3 * 3];
    reverse_paste(&mut image, c, h, w, &view, 3, 3, &CropParams::full(h, w));
    assert!(image.iter().all(|&v| v == 2.5));
}

#[test]
fn cutout_fills_one_color_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut img = vec![0.5f64; 3 * 8 * 8];
    cutout(&mut rng, &mut img, 3, 8, 8, 0.0);
    assert!(img.iter().all(|&v| v == 0.5));
    // Oversized patch covers everything: each channel becomes constant.
    cutout(&mut rng, &mut img, 3, 8, 8, 4.0);
    for ch in 0..3 {
        let plane = &img[ch * 64..(ch + 1) * 64];
        assert!(plane.iter().all(|&v| v == plane[0]));
        assert!((0.0..1.0).contains(&plane[0]));
    }
    // Mid-size patch changes some pixels and leaves some untouched.
    let mut img2 = vec![0.5f64; 64];
    cutout(&mut rng, &mut img2, 1, 8, 8, 0.5);
    assert!(img2.iter().any(|&v| v != 0.5));
    assert!(img2.iter().any(|&v| v == 0.5));
}
