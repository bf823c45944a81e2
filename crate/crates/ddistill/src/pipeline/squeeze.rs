//! Teacher training on the real train split: plain supervised SGD/AdamW
//! with cosine decay, label smoothing, and light augmentation. Ends by
//! writing `teacher.ckpt` whose running BN statistics are the whole point:
//! they are the distribution summary the recovery stage matches against.

use ddistill_core::nn::{accuracy, BnMode, CheckpointMeta, Network};
use ddistill_core::optim::{cosine_lr, Adam, Sgd};
use ddistill_core::rng::{purpose, stream_rng};
use ddistill_core::tape::Tape;
use ddistill_core::tensor::Tensor;
use ddistill_core::Scalar;

use crate::checkpoint::save_checkpoint;
use crate::config::{RunConfig, Stage};
use crate::data::epoch_order;
use crate::error::Result;
use crate::pipeline::{
    augmented_views, eval_top1, load_data, run_stage, stage_tag, tagged, LossGuard, StageCtx,
    StageOutcome,
};
use crate::report::MetricRow;
use ddistill_core::nn::{one_hot_targets, soft_cross_entropy};

pub const TEACHER_NAME: &str = "teacher.ckpt";

pub fn run(cfg: &RunConfig, force: bool) -> Result<StageOutcome> {
    match cfg.run.precision.as_str() {
        "f64" => run_stage(cfg, Stage::Squeeze, force, body::<f64>),
        _ => run_stage(cfg, Stage::Squeeze, force, body::<f32>),
    }
}

enum Optimizer<T: Scalar> {
    Sgd(Sgd<T>),
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    fn step(&mut self, params: &[Tensor<T>], lr: f64) {
        match self {
            Optimizer::Sgd(o) => {
                o.lr = lr;
                o.step(params);
            }
            Optimizer::Adam(o) => {
                o.lr = lr;
                o.step(params);
            }
        }
    }
}

fn body<T: Scalar>(ctx: &StageCtx) -> Result<(Vec<MetricRow>, serde_json::Value)> {
    let cfg = ctx.cfg;
    let sq = &cfg.squeeze;
    let seed = cfg.stage_seed(Stage::Squeeze);
    let bundle = load_data(cfg)?;
    let train = &bundle.train;
    let spec = cfg.teacher_spec(train.channels, train.height, train.width, train.classes)?;

    let mut init_rng = stream_rng(seed, purpose::MODEL_INIT, tagged(stage_tag::SQUEEZE, 0));
    let net: Network<T> = Network::init(&spec, &mut init_rng, true)?;
    let params = net.params();
    let mut opt = match sq.optimizer.as_str() {
        "adamw" => Optimizer::Adam(Adam::adamw(sq.lr, 0.9, 0.999, 1e-8, sq.weight_decay)),
        _ => Optimizer::Sgd(Sgd::new(sq.lr, sq.momentum, sq.weight_decay)),
    };

    let n = train.len();
    let steps_per_epoch = n.div_ceil(sq.batch_size);
    let total_steps = sq.epochs * steps_per_epoch;
    let mut guard = LossGuard::new("squeeze");
    let mut rows = Vec::new();
    let mut global_step = 0usize;

    for epoch in 0..sq.epochs {
        let order = epoch_order(n, seed, tagged(stage_tag::SQUEEZE, epoch as u64));
        let mut aug_rng = stream_rng(seed, purpose::AUGMENT, tagged(stage_tag::SQUEEZE, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut epoch_acc = 0.0;
        for chunk in order.chunks(sq.batch_size) {
            let views: Vec<T> = augmented_views(
                train,
                &bundle.norm,
                chunk,
                &sq.augment,
                &mut aug_rng,
                spec.image_h,
                spec.image_w,
            );
            let x = Tensor::from_vec(
                views,
                &[chunk.len(), spec.in_channels, spec.image_h, spec.image_w],
            )?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i] as usize).collect();
            let targets = one_hot_targets::<T>(&labels, spec.classes, sq.label_smoothing)?;
            let tape = Tape::new();
            let out = net.forward(&tape, &x, BnMode::Batch { update_running: true }, false)?;
            let loss = soft_cross_entropy(&tape, &out.logits, &targets, 1.0)?;
            tape.backward(&loss)?;
            let lv = loss.item().into_f64();
            guard.check(global_step, lv)?;
            epoch_loss += lv * chunk.len() as f64;
            epoch_acc += accuracy(&out.logits, &labels) * chunk.len() as f64;
            let lr = cosine_lr(sq.lr, global_step, total_steps)?;
            opt.step(&params, lr);
            for p in &params {
                p.zero_grad();
            }
            global_step += 1;
        }
        rows.push(MetricRow::new(&ctx.run_id, seed, "train_loss", epoch as u64, epoch_loss / n as f64));
        rows.push(MetricRow::new(&ctx.run_id, seed, "train_top1", epoch as u64, epoch_acc / n as f64));
        if (epoch + 1) % sq.eval_every.max(1) == 0 && epoch + 1 != sq.epochs {
            let top1 = eval_top1(&net, &bundle.val, &bundle.norm, 250)?;
            rows.push(MetricRow::new(&ctx.run_id, seed, "val_top1", epoch as u64, top1));
            println!(
                "[squeeze] epoch {epoch}: train_loss {:.4}, val_top1 {:.4}",
                epoch_loss / n as f64,
                top1
            );
        }
    }

    let val_top1 = eval_top1(&net, &bundle.val, &bundle.norm, 250)?;
    rows.push(MetricRow::new(&ctx.run_id, seed, "val_top1", sq.epochs as u64 - 1, val_top1));
    let meta = CheckpointMeta {
        stage: "squeeze".into(),
        dataset: bundle.id.clone(),
        seed,
        epochs: sq.epochs,
        val_top1,
    };
    save_checkpoint(&ctx.dir.join(TEACHER_NAME), &net, meta)?;
    let summary = serde_json::json!({
        "dataset": bundle.id,
        "arch": spec.arch.name(),
        "val_top1": val_top1,
        "epochs": sq.epochs,
        "train_images": n,
    });
    Ok((rows, summary))
}
