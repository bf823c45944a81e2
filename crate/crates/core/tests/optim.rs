//! Optimizer steps against an independent scalar reference, and the cosine
//! learning-rate schedule against closed forms.

use ddistill_core::optim::{cosine_lr, Adam, Sgd};
use ddistill_core::{ops, Tape, Tensor};

/// Drive one backward pass that deposits exactly `grad` on `p`.
fn set_grad(p: &Tensor<f64>, grad: &[f64]) {
    p.zero_grad();
    let tape = Tape::new();
    let probe = Tensor::from_vec(grad.to_vec(), p.shape()).unwrap();
    let weighted = ops::mul(&tape, p, &probe).unwrap();
    let loss = ops::sum(&tape, &weighted).unwrap();
    tape.backward(&loss).unwrap();
    let got = p.grad().unwrap();
    for (g, e) in got.iter().zip(grad) {
        assert_eq!(g, e);
    }
}

/// Independent scalar Adam, written directly from the update equations.
fn adam_reference(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
    }
    p
}

#[test]
fn adam_single_step_hand_value() {
    let p = Tensor::param_from_vec(vec![1.0f64], &[1]).unwrap();
    let mut opt = Adam::new(0.1, 0.5, 0.9, 1e-8);
    set_grad(&p, &[1.0]);
    opt.step(&[p.clone()]);
    let got = p.data()[0];
    assert!((got - 0.900000001).abs() < 1e-12, "got {got}");
    assert!((got - 0.9).abs() < 1e-8);
    assert_eq!(opt.t(), 1);
}

#[test]
fn adam_matches_reference_over_steps() {
    let grad_seqs: [&[f64]; 2] = [&[1.0, -0.5], &[0.25, 1.5, -2.0]];
    let expected = [0.900000001, -0.6825261528423435];
    let starts = [1.0, -0.3];
    for ((grads, &want), &start) in grad_seqs.iter().zip(&expected).zip(&starts) {
        let lr = if grads.len() == 2 { 0.1 } else { 0.25 };
        let p = Tensor::param_from_vec(vec![start], &[1]).unwrap();
        let mut opt = Adam::new(lr, 0.5, 0.9, 1e-8);
        for &g in *grads {
            set_grad(&p, &[g]);
            opt.step(&[p.clone()]);
        }
        let got = p.data()[0];
        let reference = adam_reference(start, grads, lr, 0.5, 0.9, 1e-8);
        assert!((got - reference).abs() < 1e-12, "vs reference: {got} vs {reference}");
        assert!((got - want).abs() < 1e-12, "vs frozen value: {got} vs {want}");
    }
}

#[test]
fn adam_is_elementwise_independent() {
    let p = Tensor::param_from_vec(vec![1.0f64, -0.3], &[2]).unwrap();
    let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
    let seqs: [&[f64]; 3] = [&[1.0, 0.7], &[-0.5, 0.2], &[0.1, -0.1]];
    for step in seqs {
        set_grad(&p, step);
        opt.step(&[p.clone()]);
    }
    let per_coord: Vec<f64> = (0..2)
        .map(|i| {
            let grads: Vec<f64> = seqs.iter().map(|s| s[i]).collect();
            adam_reference(if i == 0 { 1.0 } else { -0.3 }, &grads, 0.05, 0.9, 0.999, 1e-8)
        })
        .collect();
    let got = p.to_vec();
    for (g, e) in got.iter().zip(&per_coord) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn adamw_decoupled_decay_applies_before_update() {
    // Zero gradient: the update term vanishes, only the decay acts.
    let p = Tensor::param_from_vec(vec![1.0f64], &[1]).unwrap();
    let mut opt = Adam::adamw(0.1, 0.9, 0.999, 1e-8, 0.1);
    set_grad(&p, &[0.0]);
    opt.step(&[p.clone()]);
    assert!((p.data()[0] - 0.99).abs() < 1e-12);
}

#[test]
fn sgd_momentum_hand_sequence() {
    // v1 = 1 -> p = 0.9; v2 = 0.9 * 1 + 1 = 1.9 -> p = 0.9 - 0.19 = 0.71.
    let p = Tensor::param_from_vec(vec![1.0f64], &[1]).unwrap();
    let mut opt = Sgd::new(0.1, 0.9, 0.0);
    set_grad(&p, &[1.0]);
    opt.step(&[p.clone()]);
    assert!((p.data()[0] - 0.9).abs() < 1e-12);
    set_grad(&p, &[1.0]);
    opt.step(&[p.clone()]);
    assert!((p.data()[0] - 0.71).abs() < 1e-12);
}

#[test]
fn sgd_weight_decay_adds_to_gradient() {
    // g' = g + wd * p = 1 + 0.5 * 2 = 2; p = 2 - 0.1 * 2 = 1.8.
    let p = Tensor::param_from_vec(vec![2.0f64], &[1]).unwrap();
    let mut opt = Sgd::new(0.1, 0.0, 0.5);
    set_grad(&p, &[1.0]);
    opt.step(&[p.clone()]);
    assert!((p.data()[0] - 1.8).abs() < 1e-12);
}

#[test]
fn skipped_params_keep_state_slots() {
    let a = Tensor::param_from_vec(vec![1.0f64], &[1]).unwrap();
    let b = Tensor::param_from_vec(vec![1.0f64], &[1]).unwrap();
    let mut opt = Sgd::new(0.1, 0.9, 0.0);
    set_grad(&a, &[1.0]);
    set_grad(&b, &[1.0]);
    opt.step(&[a.clone(), b.clone()]);
    // b sits out one step (no grad), then returns; its velocity persists.
    b.zero_grad();
    set_grad(&a, &[1.0]);
    opt.step(&[a.clone(), b.clone()]);
    set_grad(&a, &[1.0]);
    set_grad(&b, &[1.0]);
    opt.step(&[a.clone(), b.clone()]);
    // a took 3 steps (v: 1, 1.9, 2.71); b took 2 with a gap (v: 1, 1.9).
    assert!((a.data()[0] - (1.0 - 0.1 - 0.19 - 0.271)).abs() < 1e-12);
    assert!((b.data()[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-12);
}

#[test]
fn cosine_lr_closed_forms() {
    assert_eq!(cosine_lr(2.0, 0, 100).unwrap(), 2.0);
    assert!((cosine_lr(2.0, 25, 100).unwrap() - 1.7071067811865475).abs() < 1e-15);
    assert!((cosine_lr(2.0, 50, 100).unwrap() - 1.0).abs() < 1e-15);
    assert!(cosine_lr(2.0, 100, 100).unwrap().abs() < 1e-15);
    assert!(cosine_lr(1.0, 0, 0).is_err());
    assert!(cosine_lr(1.0, 101, 100).is_err());
}
