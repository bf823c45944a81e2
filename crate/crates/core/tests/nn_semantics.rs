//! Batch-norm statistics bookkeeping, loss closed forms, and the
//! typed-checkpoint roundtrip for both architectures.

use ddistill_core::nn::{
    accuracy, bn_matching_loss, one_hot_targets, soft_cross_entropy, Architecture,
    BatchNorm2dLayer, BnLayerStats, BnMode, BnSnapshot, BnTarget, CheckpointMeta, ModelSpec,
    Network,
};
use ddistill_core::rng::{purpose, stream_rng};
use ddistill_core::{Scalar, Tape, Tensor};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch_1234() -> Tensor<f64> {
    // (2,1,2,2) holding 1..=8.
    Tensor::from_vec((1..=8).map(|v| v as f64).collect(), &[2, 1, 2, 2]).unwrap()
}

#[test]
fn batch_mode_updates_running_stats_with_unbiased_variance() {
    let tape = Tape::new();
    let bn = BatchNorm2dLayer::<f64>::init(1, true);
    let x = batch_1234();
    let y = bn.forward(&tape, &x, BnMode::Batch { update_running: true }, None).unwrap();

    // mean 4.5, biased var 5.25, unbiased 6.0; momentum 0.1 from (0, 1).
    assert_eq!(bn.running_mean.to_vec(), vec![0.45]);
    assert_eq!(bn.running_var.to_vec(), vec![1.5]);

    // The normalized output uses the biased batch statistics.
    let out = y.to_vec();
    let m: f64 = out.iter().sum::<f64>() / 8.0;
    let v: f64 = out.iter().map(|o| (o - m) * (o - m)).sum::<f64>() / 8.0;
    assert!(m.abs() < 1e-12, "mean {m}");
    assert!((v - 1.0).abs() < 1e-4, "var {v}");
}

#[test]
fn frozen_and_running_modes_leave_buffers_untouched() {
    let tape = Tape::new();
    let bn = BatchNorm2dLayer::<f64>::init(1, true);
    bn.running_mean.set_data(vec![0.25]).unwrap();
    bn.running_var.set_data(vec![2.0]).unwrap();
    let x = batch_1234();

    let mut snap = BnSnapshot { layers: Vec::new() };
    bn.forward(&tape, &x, BnMode::Batch { update_running: false }, Some(&mut snap)).unwrap();
    assert_eq!(bn.running_mean.to_vec(), vec![0.25]);
    assert_eq!(bn.running_var.to_vec(), vec![2.0]);
    // The snapshot still records the batch statistics of this forward.
    assert_eq!(snap.layers.len(), 1);
    assert_eq!(snap.layers[0].mean.to_vec(), vec![4.5]);
    assert_eq!(snap.layers[0].var.to_vec(), vec![5.25]);

    bn.forward(&tape, &x, BnMode::Running, None).unwrap();
    assert_eq!(bn.running_mean.to_vec(), vec![0.25]);
    assert_eq!(bn.running_var.to_vec(), vec![2.0]);
}

#[test]
fn running_mode_applies_the_stored_statistics_exactly() {
    let tape = Tape::new();
    let bn = BatchNorm2dLayer::<f64>::init(1, true);
    bn.gamma.set_data(vec![2.0]).unwrap();
    bn.beta.set_data(vec![-1.0]).unwrap();
    bn.running_mean.set_data(vec![1.0]).unwrap();
    bn.running_var.set_data(vec![4.0]).unwrap();
    let x = Tensor::from_vec(vec![3.0], &[1, 1, 1, 1]).unwrap();
    let y = bn.forward(&tape, &x, BnMode::Running, None).unwrap();
    assert!((y.to_vec()[0] - 0.9999975000046875).abs() < 1e-15);
}

#[test]
fn snapshot_length_matches_layer_count_per_architecture() {
    for (arch, want) in [(Architecture::ConvNetBn3, 3), (Architecture::ResNet8Bn, 9)] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ModelSpec { width_mult: 0.25, ..ModelSpec::new(arch, 3, 16, 16, 4) };
        let net = Network::<f32>::init(&spec, &mut rng, false).unwrap();
        assert_eq!(net.bn_layers().len(), want);
        assert_eq!(net.bn_targets().len(), want);

        let tape = Tape::inference();
        let x = Tensor::full(&[2, 3, 16, 16], 0.1f32);
        let out = net
            .forward(&tape, &x, BnMode::Batch { update_running: false }, true)
            .unwrap();
        assert_eq!(out.bn_stats.expect("stats captured").layers.len(), want);
        let out2 = net.forward(&tape, &x, BnMode::Running, false).unwrap();
        assert!(out2.bn_stats.is_none());
    }
}

#[test]
fn checkpoint_roundtrip_preserves_every_weight_and_the_forward_pass() {
    for arch in [Architecture::ConvNetBn3, Architecture::ResNet8Bn] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ModelSpec { width_mult: 0.25, ..ModelSpec::new(arch, 3, 16, 16, 5) };
        let net = Network::<f32>::init(&spec, &mut rng, true).unwrap();

        // Make the running buffers nontrivial before the roundtrip.
        let tape = Tape::inference();
        let x = Tensor::from_vec(
            (0..2 * 3 * 16 * 16).map(|i| (i % 37) as f32 * 0.05).collect(),
            &[2, 3, 16, 16],
        )
        .unwrap();
        net.forward(&tape, &x, BnMode::Batch { update_running: true }, false).unwrap();

        let meta = CheckpointMeta {
            stage: "squeeze".into(),
            dataset: "toy".into(),
            seed: 11,
            epochs: 1,
            val_top1: 0.5,
        };
        let ckpt = net.to_checkpoint(meta);
        let back = Network::<f32>::from_checkpoint(&ckpt, false).unwrap();

        for (a, b) in net.params().iter().zip(back.params().iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
        for ((na, a), (nb, b)) in net.named_buffers().iter().zip(back.named_buffers().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.to_vec(), b.to_vec());
        }

        let y1 = net.forward(&tape, &x, BnMode::Running, false).unwrap();
        let y2 = back.forward(&tape, &x, BnMode::Running, false).unwrap();
        assert_eq!(y1.logits.to_vec(), y2.logits.to_vec());
    }
}

#[test]
fn doctored_checkpoints_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec =
        ModelSpec { width_mult: 0.25, ..ModelSpec::new(Architecture::ConvNetBn3, 1, 16, 16, 3) };
    let net = Network::<f64>::init(&spec, &mut rng, false).unwrap();
    let meta = CheckpointMeta {
        stage: "squeeze".into(),
        dataset: "toy".into(),
        seed: 0,
        epochs: 0,
        val_top1: 0.0,
    };

    let mut missing = net.to_checkpoint(meta.clone());
    missing.params.pop();
    assert!(Network::<f64>::from_checkpoint(&missing, false).is_err());

    let mut truncated = net.to_checkpoint(meta);
    truncated.params[0].pop();
    assert!(Network::<f64>::from_checkpoint(&truncated, false).is_err());
}

#[test]
fn uniform_logits_cost_exactly_ln_classes() {
    for classes in [3usize, 10] {
        let tape = Tape::inference();
        let logits = Tensor::full(&[4, classes], 0.7f64);
        // Any valid target rows: use a lopsided but normalized distribution.
        let mut rows = Vec::new();
        for i in 0..4 {
            let mut row = vec![0.5 / (classes - 1) as f64; classes];
            row[i % classes] = 0.5;
            rows.extend(row);
        }
        let targets = Tensor::from_vec(rows, &[4, classes]).unwrap();
        let loss = soft_cross_entropy(&tape, &logits, &targets, 1.0).unwrap();
        let want = (classes as f64).ln();
        assert!((loss.item() - want).abs() < 1e-12);
    }
}

#[test]
fn temperature_rescales_the_logits() {
    let tape = Tape::inference();
    let logits = Tensor::from_vec(vec![2.0f64, 0.0], &[1, 2]).unwrap();
    let targets = Tensor::from_vec(vec![0.7, 0.3], &[1, 2]).unwrap();
    let loss = soft_cross_entropy(&tape, &logits, &targets, 2.0).unwrap();
    assert!((loss.item() - 0.6132616875182229).abs() < 1e-14);
}

#[test]
fn loss_rejects_bad_targets_and_temperatures() {
    let tape = Tape::inference();
    let logits = Tensor::from_vec(vec![0.0f64; 4], &[2, 2]).unwrap();
    let bad_sum = Tensor::from_vec(vec![0.5, 0.6, 0.5, 0.5], &[2, 2]).unwrap();
    assert!(soft_cross_entropy(&tape, &logits, &bad_sum, 1.0).is_err());
    let negative = Tensor::from_vec(vec![1.2, -0.2, 0.5, 0.5], &[2, 2]).unwrap();
    assert!(soft_cross_entropy(&tape, &logits, &negative, 1.0).is_err());
    let good = Tensor::from_vec(vec![0.5f64; 4], &[2, 2]).unwrap();
    assert!(soft_cross_entropy(&tape, &logits, &good, 0.0).is_err());
    assert!(soft_cross_entropy(&tape, &logits, &good, -1.0).is_err());
    let wrong_shape = Tensor::from_vec(vec![1.0f64, 0.0], &[1, 2]).unwrap();
    assert!(soft_cross_entropy(&tape, &logits, &wrong_shape, 1.0).is_err());
}

#[test]
fn smoothed_one_hot_rows_are_distributions() {
    let t = one_hot_targets::<f64>(&[2, 0], 4, 0.1).unwrap();
    assert_eq!(t.shape(), &[2, 4]);
    let d = t.to_vec();
    assert!((d[2] - 0.925).abs() < 1e-15 && (d[0] - 0.025).abs() < 1e-15);
    for row in d.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(one_hot_targets::<f64>(&[4], 4, 0.0).is_err());
    assert!(one_hot_targets::<f64>(&[0], 4, 1.0).is_err());
}

#[test]
fn accuracy_breaks_ties_toward_the_lowest_index() {
    let logits = Tensor::from_vec(vec![0.3f64, 0.9, 0.9, 1.0, 0.2, 0.3], &[2, 3]).unwrap();
    assert_eq!(accuracy(&logits, &[1, 0]), 1.0);
    assert_eq!(accuracy(&logits, &[2, 0]), 0.5);
}

fn stats_layer(mean: &[f64], var: &[f64]) -> BnLayerStats<f64> {
    BnLayerStats {
        mean: Tensor::from_vec(mean.to_vec(), &[mean.len()]).unwrap(),
        var: Tensor::from_vec(var.to_vec(), &[var.len()]).unwrap(),
    }
}

#[test]
fn statistic_matching_loss_closed_forms() {
    let tape = Tape::inference();

    // Exact match costs zero.
    let snap = BnSnapshot { layers: vec![stats_layer(&[0.3, -0.2], &[1.1, 0.9])] };
    let targets = vec![BnTarget { mean: vec![0.3, -0.2], var: vec![1.1, 0.9] }];
    let loss = bn_matching_loss(&tape, &snap, &targets).unwrap();
    assert_eq!(loss.item(), 0.0);

    // A (0.6, 0.8) mean gap is an L2 norm of exactly 1.
    let targets2 = vec![BnTarget { mean: vec![0.9, -1.0], var: vec![1.1, 0.9] }];
    let loss2 = bn_matching_loss(&tape, &snap, &targets2).unwrap().item();
    assert!((loss2 - 1.0).abs() < 1e-12);

    // Channel order within a layer does not matter for the norm.
    let snap_swapped = BnSnapshot { layers: vec![stats_layer(&[-0.2, 0.3], &[0.9, 1.1])] };
    let targets_swapped = vec![BnTarget { mean: vec![-1.0, 0.9], var: vec![0.9, 1.1] }];
    let loss3 = bn_matching_loss(&tape, &snap_swapped, &targets_swapped).unwrap().item();
    assert!((loss3 - loss2).abs() < 1e-12);

    // Layers contribute additively.
    let snap_two = BnSnapshot {
        layers: vec![stats_layer(&[0.3, -0.2], &[1.1, 0.9]), stats_layer(&[0.3, -0.2], &[1.1, 0.9])],
    };
    let targets_two = vec![targets2[0].clone(), targets2[0].clone()];
    let loss4 = bn_matching_loss(&tape, &snap_two, &targets_two).unwrap().item();
    assert!((loss4 - 2.0 * loss2).abs() < 1e-12);

    // Mismatched layer counts and empty targets are rejected.
    assert!(bn_matching_loss(&tape, &snap_two, &targets2).is_err());
    let empty: Vec<BnTarget<f64>> = Vec::new();
    assert!(bn_matching_loss(&tape, &BnSnapshot { layers: Vec::new() }, &empty).is_err());
}

#[test]
fn parameter_naming_follows_the_layer_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec =
        ModelSpec { width_mult: 0.25, ..ModelSpec::new(Architecture::ResNet8Bn, 3, 16, 16, 4) };
    let net = Network::<f32>::init(&spec, &mut rng, true).unwrap();
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    assert!(names.contains(&"stem.conv.weight".to_string()), "{names:?}");
    assert!(names.contains(&"block2.down.bn.gamma".to_string()), "{names:?}");
    assert!(names.contains(&"head.bias".to_string()), "{names:?}");
    let buffers: Vec<String> = net.named_buffers().into_iter().map(|(n, _)| n).collect();
    assert!(buffers.contains(&"block3.c2.bn.running_var".to_string()), "{buffers:?}");
    // Width multiplier applies to the base width of 16.
    let params = net.named_params();
    let head_w = &params.iter().find(|(n, _)| n == "head.weight").unwrap().1;
    assert_eq!(head_w.shape(), &[16, 4]); // 4 * (16 * 0.25) features, 4 classes
}

fn shuffled_regularizer<T: Scalar>(trials: usize) {
    let spec = ModelSpec::new(Architecture::ConvNetBn3, 3, 16, 16, 5);
    let mut rng = stream_rng(9, purpose::MODEL_INIT, 0);
    let net: Network<T> = Network::init(&spec, &mut rng, false).unwrap();
    let n = 13usize;
    let pix = 3 * 16 * 16;
    let targets: Vec<BnTarget<T>> = net
        .bn_targets()
        .iter()
        .map(|t| BnTarget { mean: t.mean.clone(), var: t.var.clone() })
        .collect();
    let reg = |data: Vec<T>| {
        let tape = Tape::new();
        let x = Tensor::from_vec(data, &[n, 3, 16, 16]).unwrap();
        let out = net.forward(&tape, &x, BnMode::Batch { update_running: false }, true).unwrap();
        bn_matching_loss(&tape, &out.bn_stats.unwrap(), &targets).unwrap().item()
    };
    for _ in 0..trials {
        let mut data = vec![T::zero(); n * pix];
        for v in data.iter_mut() {
            *v = T::from_f64(rng.random_range(-2.5..2.5));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut permuted = vec![T::zero(); n * pix];
        for (dst, &src) in order.iter().enumerate() {
            permuted[dst * pix..(dst + 1) * pix]
                .copy_from_slice(&data[src * pix..(src + 1) * pix]);
        }
        let (r1, r2) = (reg(data), reg(permuted));
        assert_eq!(
            r1.into_f64().to_bits(),
            r2.into_f64().to_bits(),
            "batch order changed the regularizer: {r1} vs {r2}"
        );
    }
}

// The synthetic batch is a set; reordering it must not move the loss at all.
#[test]
fn statistic_matching_is_exactly_batch_order_invariant() {
    shuffled_regularizer::<f64>(25);
    shuffled_regularizer::<f32>(25);
}
