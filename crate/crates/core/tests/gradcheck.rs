//! Finite-difference verification of every backward rule.
//!
//! Analytic gradients from the reverse pass are compared against central
//! differences `(f(x+h) - f(x-h)) / 2h` computed by rebuilding the forward
//! pass with perturbed leaf data. All checks run in f64 with h = 1e-4 and
//! require max relative error < 1e-5, where
//! `rel = |a - n| / max(|a|, |n|, 1e-8)`.

use ddistill_core::augment::CropParams;
use ddistill_core::nn::{
    bn_matching_loss, soft_cross_entropy, Architecture, BnMode, BnTarget, ModelSpec, Network,
};
use ddistill_core::{ops, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::param_from_vec(uniform(rng, n, -1.0, 1.0), shape).unwrap()
}

/// Fixed random linear functional turning any output into a scalar loss that
/// is sensitive to every output element.
fn scalarize(
    tape: &Tape<f64>,
    out: &Tensor<f64>,
    probe: &Tensor<f64>,
) -> Tensor<f64> {
    let weighted = ops::mul(tape, out, probe).unwrap();
    ops::sum(tape, &weighted).unwrap()
}

fn eval_loss(f: &dyn Fn(&Tape<f64>) -> Tensor<f64>) -> f64 {
    let tape = Tape::inference();
    f(&tape).item()
}

/// Core harness: analytic gradients for `leaves` under loss `f`, then
/// per-element central differences. Returns the max relative error.
fn fd_max_rel_err(leaves: &[Tensor<f64>], f: &dyn Fn(&Tape<f64>) -> Tensor<f64>) -> f64 {
    for l in leaves {
        l.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape);
    tape.backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    let mut max_rel = 0.0f64;
    for (li, l) in leaves.iter().enumerate() {
        for i in 0..l.numel() {
            let orig = l.data()[i];
            l.with_data_mut(|d| d[i] = orig + H);
            let fp = eval_loss(f);
            l.with_data_mut(|d| d[i] = orig - H);
            let fm = eval_loss(f);
            l.with_data_mut(|d| d[i] = orig);
            let num = (fp - fm) / (2.0 * H);
            let a = analytic[li][i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

fn check(name: &str, leaves: &[Tensor<f64>], f: &dyn Fn(&Tape<f64>) -> Tensor<f64>) {
    let err = fd_max_rel_err(leaves, f);
    assert!(err < TOL, "{name}: max relative error {err:.3e} >= {TOL:.0e}");
}

#[test]
fn elementwise_ops() {
    let mut r = rng(11);
    let a = leaf(&mut r, &[3, 4]);
    let b = leaf(&mut r, &[3, 4]);
    let probe = Tensor::from_vec(uniform(&mut r, 12, -1.0, 1.0), &[3, 4]).unwrap();
    check("add", &[a.clone(), b.clone()], &|t| {
        scalarize(t, &ops::add(t, &a, &b).unwrap(), &probe)
    });
    check("sub", &[a.clone(), b.clone()], &|t| {
        scalarize(t, &ops::sub(t, &a, &b).unwrap(), &probe)
    });
    check("mul", &[a.clone(), b.clone()], &|t| {
        scalarize(t, &ops::mul(t, &a, &b).unwrap(), &probe)
    });
    check("scale", &[a.clone()], &|t| {
        scalarize(t, &ops::scale(t, &a, -1.7).unwrap(), &probe)
    });
}

#[test]
fn matmul_and_bias() {
    let mut r = rng(12);
    let a = leaf(&mut r, &[3, 4]);
    let b = leaf(&mut r, &[4, 5]);
    let probe = Tensor::from_vec(uniform(&mut r, 15, -1.0, 1.0), &[3, 5]).unwrap();
    check("matmul", &[a.clone(), b.clone()], &|t| {
        scalarize(t, &ops::matmul(t, &a, &b).unwrap(), &probe)
    });
    let x = leaf(&mut r, &[4, 6]);
    let bias = leaf(&mut r, &[6]);
    let probe2 = Tensor::from_vec(uniform(&mut r, 24, -1.0, 1.0), &[4, 6]).unwrap();
    check("bias_add", &[x.clone(), bias.clone()], &|t| {
        scalarize(t, &ops::bias_add(t, &x, &bias).unwrap(), &probe2)
    });
}

#[test]
fn conv_variants() {
    let mut r = rng(13);
    let x = leaf(&mut r, &[2, 3, 6, 7]);
    let w = leaf(&mut r, &[4, 3, 3, 3]);
    let probe = Tensor::from_vec(uniform(&mut r, 2 * 4 * 6 * 7, -1.0, 1.0), &[2, 4, 6, 7]).unwrap();
    check("conv2d s1 p1", &[x.clone(), w.clone()], &|t| {
        scalarize(t, &ops::conv2d(t, &x, &w, 1, 1).unwrap(), &probe)
    });
    let probe2 = Tensor::from_vec(uniform(&mut r, 2 * 4 * 2 * 3, -1.0, 1.0), &[2, 4, 2, 3]).unwrap();
    check("conv2d s2 p0", &[x.clone(), w.clone()], &|t| {
        scalarize(t, &ops::conv2d(t, &x, &w, 2, 0).unwrap(), &probe2)
    });
    let w1 = leaf(&mut r, &[5, 3, 1, 1]);
    let probe3 = Tensor::from_vec(uniform(&mut r, 2 * 5 * 3 * 4, -1.0, 1.0), &[2, 5, 3, 4]).unwrap();
    check("conv2d 1x1 s2", &[x.clone(), w1.clone()], &|t| {
        scalarize(t, &ops::conv2d(t, &x, &w1, 2, 0).unwrap(), &probe3)
    });
}

#[test]
fn pooling_and_shape_ops() {
    let mut r = rng(14);
    let x = leaf(&mut r, &[2, 3, 6, 6]);
    let probe = Tensor::from_vec(uniform(&mut r, 2 * 3 * 3 * 3, -1.0, 1.0), &[2, 3, 3, 3]).unwrap();
    check("avg_pool2d k2 s2", &[x.clone()], &|t| {
        scalarize(t, &ops::avg_pool2d(t, &x, 2, 2).unwrap(), &probe)
    });
    let probe2 = Tensor::from_vec(uniform(&mut r, 2 * 3 * 4 * 4, -1.0, 1.0), &[2, 3, 4, 4]).unwrap();
    check("avg_pool2d k3 s1", &[x.clone()], &|t| {
        scalarize(t, &ops::avg_pool2d(t, &x, 3, 1).unwrap(), &probe2)
    });
    let probe3 = Tensor::from_vec(uniform(&mut r, 216, -1.0, 1.0), &[2, 108]).unwrap();
    check("flatten", &[x.clone()], &|t| {
        scalarize(t, &ops::flatten(t, &x).unwrap(), &probe3)
    });
    let probe4 = Tensor::from_vec(uniform(&mut r, 216, -1.0, 1.0), &[6, 36]).unwrap();
    check("reshape", &[x.clone()], &|t| {
        scalarize(t, &ops::reshape(t, &x, &[6, 36]).unwrap(), &probe4)
    });
    check("relu", &[x.clone()], &|t| {
        let y = ops::relu(t, &x).unwrap();
        ops::sum(t, &y).unwrap()
    });
}

#[test]
fn channel_statistics_and_normalize() {
    let mut r = rng(15);
    let x = leaf(&mut r, &[2, 3, 4, 5]);
    let probe_c = Tensor::from_vec(uniform(&mut r, 3, -1.0, 1.0), &[3]).unwrap();
    check("channel_mean", &[x.clone()], &|t| {
        scalarize(t, &ops::channel_mean(t, &x).unwrap(), &probe_c)
    });
    let center = leaf(&mut r, &[3]);
    check("channel_var", &[x.clone(), center.clone()], &|t| {
        scalarize(t, &ops::channel_var(t, &x, &center).unwrap(), &probe_c)
    });
    // Standalone normalize with independent leaves for every input.
    let xn = leaf(&mut r, &[2, 3, 4, 4]);
    let mean = leaf(&mut r, &[3]);
    let var = Tensor::param_from_vec(uniform(&mut r, 3, 0.5, 1.5), &[3]).unwrap();
    let gamma = leaf(&mut r, &[3]);
    let beta = leaf(&mut r, &[3]);
    let proben = Tensor::from_vec(uniform(&mut r, 2 * 3 * 16, -1.0, 1.0), &[2, 3, 4, 4]).unwrap();
    check(
        "normalize",
        &[xn.clone(), mean.clone(), var.clone(), gamma.clone(), beta.clone()],
        &|t| {
            scalarize(
                t,
                &ops::normalize(t, &xn, &mean, &var, &gamma, &beta, 1e-5).unwrap(),
                &proben,
            )
        },
    );
    // Composed batch norm: stats computed from x on the tape.
    check("batchnorm composition", &[xn.clone(), gamma.clone(), beta.clone()], &|t| {
        let m = ops::channel_mean(t, &xn).unwrap();
        let v = ops::channel_var(t, &xn, &m).unwrap();
        let y = ops::normalize(t, &xn, &m, &v, &gamma, &beta, 1e-5).unwrap();
        scalarize(t, &y, &proben)
    });
}

#[test]
fn log_softmax_and_losses() {
    let mut r = rng(16);
    let x = leaf(&mut r, &[4, 7]);
    let probe = Tensor::from_vec(uniform(&mut r, 28, -1.0, 1.0), &[4, 7]).unwrap();
    check("log_softmax", &[x.clone()], &|t| {
        scalarize(t, &ops::log_softmax(t, &x).unwrap(), &probe)
    });
    let logits = leaf(&mut r, &[4, 5]);
    let mut raw = uniform(&mut r, 20, 0.05, 1.0);
    for row in raw.chunks_mut(5) {
        let s: f64 = row.iter().sum();
        for v in row {
            *v /= s;
        }
    }
    let targets = Tensor::from_vec(raw, &[4, 5]).unwrap();
    check("soft_cross_entropy", &[logits.clone()], &|t| {
        soft_cross_entropy(t, &logits, &targets, 2.0).unwrap()
    });
}

#[test]
fn resize_family() {
    let mut r = rng(17);
    let x = leaf(&mut r, &[2, 3, 7, 5]);
    let probe_up = Tensor::from_vec(uniform(&mut r, 2 * 3 * 13 * 9, -1.0, 1.0), &[2, 3, 13, 9]).unwrap();
    check("bilinear_resize up", &[x.clone()], &|t| {
        scalarize(t, &ops::bilinear_resize(t, &x, 13, 9).unwrap(), &probe_up)
    });
    let probe_dn = Tensor::from_vec(uniform(&mut r, 2 * 3 * 3 * 4, -1.0, 1.0), &[2, 3, 3, 4]).unwrap();
    check("bilinear_resize down", &[x.clone()], &|t| {
        scalarize(t, &ops::bilinear_resize(t, &x, 3, 4).unwrap(), &probe_dn)
    });
    let probe_id = Tensor::from_vec(uniform(&mut r, 2 * 3 * 7 * 5, -1.0, 1.0), &[2, 3, 7, 5]).unwrap();
    check("bilinear_resize identity", &[x.clone()], &|t| {
        scalarize(t, &ops::bilinear_resize(t, &x, 7, 5).unwrap(), &probe_id)
    });

    let xi = leaf(&mut r, &[2, 3, 8, 8]);
    let params = vec![
        CropParams { top: 0, left: 0, height: 8, width: 8, flip: true },
        CropParams { top: 2, left: 1, height: 5, width: 6, flip: false },
    ];
    let probe_cr = Tensor::from_vec(uniform(&mut r, 2 * 3 * 6 * 6, -1.0, 1.0), &[2, 3, 6, 6]).unwrap();
    check("crop_resize", &[xi.clone()], &|t| {
        scalarize(t, &ops::crop_resize(t, &xi, &params, 6, 6).unwrap(), &probe_cr)
    });

    let probe_crop = Tensor::from_vec(uniform(&mut r, 2 * 3 * 9, -1.0, 1.0), &[2, 3, 3, 3]).unwrap();
    check("crop", &[xi.clone()], &|t| {
        scalarize(t, &ops::crop(t, &xi, 1, 2, 3, 3).unwrap(), &probe_crop)
    });
    let probe_pad = Tensor::from_vec(uniform(&mut r, 2 * 3 * 12 * 12, -1.0, 1.0), &[2, 3, 12, 12]).unwrap();
    check("pad", &[xi.clone()], &|t| {
        scalarize(t, &ops::pad(t, &xi, 2).unwrap(), &probe_pad)
    });
}

#[test]
fn reductions() {
    let mut r = rng(18);
    let x = leaf(&mut r, &[3, 5]);
    check("sum", &[x.clone()], &|t| ops::sum(t, &x).unwrap());
    check("mean_all", &[x.clone()], &|t| ops::mean_all(t, &x).unwrap());
    check("l2_norm", &[x.clone()], &|t| ops::l2_norm(t, &x).unwrap());
}

#[test]
fn bn_matching_loss_grad() {
    let mut r = rng(19);
    let x = leaf(&mut r, &[4, 3, 5, 5]);
    let targets = vec![BnTarget {
        mean: uniform(&mut r, 3, -0.5, 0.5),
        var: uniform(&mut r, 3, 0.5, 1.5),
    }];
    check("bn_matching_loss", &[x.clone()], &|t| {
        let m = ops::channel_mean(t, &x).unwrap();
        let v = ops::channel_var(t, &x, &m).unwrap();
        let snap = ddistill_core::nn::BnSnapshot {
            layers: vec![ddistill_core::nn::BnLayerStats { mean: m, var: v }],
        };
        bn_matching_loss(t, &snap, &targets).unwrap()
    });
}

/// End-to-end: every parameter of a small convnet, plus the input image,
/// through batch-mode BN and the soft cross-entropy loss.
#[test]
fn convnet_end_to_end() {
    let mut r = rng(20);
    let spec = ModelSpec {
        width_mult: 0.125,
        ..ModelSpec::new(Architecture::ConvNetBn3, 2, 8, 8, 3)
    };
    let net = Network::<f64>::init(&spec, &mut r, true).unwrap();
    let x = Tensor::param_from_vec(uniform(&mut r, 3 * 2 * 8 * 8, -1.0, 1.0), &[3, 2, 8, 8]).unwrap();
    let targets = ddistill_core::nn::one_hot_targets::<f64>(&[0, 2, 1], 3, 0.1).unwrap();
    let mut leaves = net.params();
    leaves.push(x.clone());
    check("convnet_bn_3 end-to-end", &leaves, &|t| {
        let out = net
            .forward(t, &x, BnMode::Batch { update_running: false }, false)
            .unwrap();
        soft_cross_entropy(t, &out.logits, &targets, 1.0).unwrap()
    });
}

/// End-to-end resnet: batch-mode BN, residual adds, downsample shortcuts,
/// global pooling. Also exercises the BN-matching plus cross-entropy sum
/// used during synthesis, differentiated with respect to the input.
#[test]
fn resnet_end_to_end() {
    let mut r = rng(21);
    let spec = ModelSpec {
        width_mult: 0.25,
        ..ModelSpec::new(Architecture::ResNet8Bn, 3, 8, 8, 3)
    };
    let net = Network::<f64>::init(&spec, &mut r, true).unwrap();
    let x = Tensor::param_from_vec(uniform(&mut r, 2 * 3 * 8 * 8, -1.0, 1.0), &[2, 3, 8, 8]).unwrap();
    let targets = ddistill_core::nn::one_hot_targets::<f64>(&[1, 0], 3, 0.0).unwrap();
    let mut leaves = net.params();
    leaves.push(x.clone());
    check("resnet8_bn end-to-end", &leaves, &|t| {
        let out = net
            .forward(t, &x, BnMode::Batch { update_running: false }, false)
            .unwrap();
        soft_cross_entropy(t, &out.logits, &targets, 1.0).unwrap()
    });

    // Frozen teacher, trainable image: the synthesis objective.
    let frozen = Network::<f64>::from_checkpoint(&net.to_checkpoint(Default::default()), false).unwrap();
    let bn_targets = frozen.bn_targets();
    check("synthesis objective wrt image", &[x.clone()], &|t| {
        let out = frozen
            .forward(t, &x, BnMode::Batch { update_running: false }, true)
            .unwrap();
        let ce = soft_cross_entropy(t, &out.logits, &targets, 1.0).unwrap();
        let reg = bn_matching_loss(t, &out.bn_stats.unwrap(), &bn_targets).unwrap();
        let reg = ops::scale(t, &reg, 0.01).unwrap();
        ops::add(t, &ce, &reg).unwrap()
    });
}
