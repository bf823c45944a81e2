//! Student training from scratch on the distilled images, replaying the
//! stored (crop, soft label) records. Reported numbers come from the real
//! validation split, which no earlier stage ever optimized against.

use ddistill_core::nn::{
    soft_cross_entropy, BnMode, CheckpointMeta, ModelSpec, Network,
};
use ddistill_core::optim::{cosine_lr, Adam};
use ddistill_core::rng::{purpose, stream_rng};
use ddistill_core::tape::Tape;
use ddistill_core::tensor::Tensor;
use ddistill_core::Scalar;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{RunConfig, Stage};
use crate::data::epoch_order;
use crate::error::{Result, ToolError};
use crate::pipeline::recover::teacher_path;
use crate::pipeline::relabel::LABEL_DIR;
use crate::pipeline::{
    ensure_stage, eval_top1, push_normalized, render_view, run_stage, stage_tag, tagged,
    LossGuard, StageCtx, StageOutcome,
};
use crate::report::MetricRow;
use crate::softlabel::SoftLabelSet;
use crate::synthset::load_synthset;

pub const STUDENT_NAME: &str = "student.ckpt";

pub fn run(cfg: &RunConfig, force: bool) -> Result<StageOutcome> {
    match cfg.run.precision.as_str() {
        "f64" => run_stage(cfg, Stage::Posttrain, force, body::<f64>),
        _ => run_stage(cfg, Stage::Posttrain, force, body::<f32>),
    }
}

pub struct StudentRecipe {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
}

/// Image pool plus replayable labels; students only ever see views derived
/// from these.
pub struct ReplaySource<'a, T: Scalar> {
    pub images: &'a [T],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: &'a SoftLabelSet,
}

impl<T: Scalar> ReplaySource<'_, T> {
    fn image(&self, i: usize) -> &[T] {
        let per = self.channels * self.height * self.width;
        &self.images[i * per..(i + 1) * per]
    }
}

/// Train a fresh student on `train_indices` (global image indices into the
/// source) for `recipe.epochs`, replaying the stored crop and label of each
/// (epoch, image). `on_epoch` runs after every epoch with the mean loss.
pub fn train_student<T: Scalar>(
    source: &ReplaySource<T>,
    train_indices: &[usize],
    spec: &ModelSpec,
    recipe: &StudentRecipe,
    seed: u64,
    init_stream: u64,
    order_stream: &dyn Fn(usize) -> u64,
    on_epoch: &mut dyn FnMut(usize, f64, &Network<T>) -> Result<()>,
) -> Result<Network<T>> {
    if recipe.epochs > source.labels.manifest.epochs {
        return Err(ToolError::validation(format!(
            "student wants {} epochs but only {} epochs of labels were stored",
            recipe.epochs, source.labels.manifest.epochs
        )));
    }
    if train_indices.is_empty() {
        return Err(ToolError::validation("student training set is empty"));
    }
    let (c, h, w) = (source.channels, source.height, source.width);
    if spec.in_channels != c || spec.image_h != h || spec.image_w != w {
        return Err(ToolError::validation(format!(
            "student expects {}x{}x{}, images are {}x{}x{}",
            spec.in_channels, spec.image_h, spec.image_w, c, h, w
        )));
    }
    let classes = source.labels.manifest.classes;
    let mut init_rng = stream_rng(seed, purpose::MODEL_INIT, init_stream);
    let net: Network<T> = Network::init(spec, &mut init_rng, true)?;
    let params = net.params();
    let mut opt = Adam::adamw(recipe.lr, 0.9, 0.999, 1e-8, recipe.weight_decay);
    let n = train_indices.len();
    let total_steps = recipe.epochs * n.div_ceil(recipe.batch_size);
    let mut guard = LossGuard::new("student");
    let mut rendered = vec![T::zero(); c * h * w];
    let mut global_step = 0usize;

    for epoch in 0..recipe.epochs {
        let order = epoch_order(n, seed, order_stream(epoch));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(recipe.batch_size) {
            let b = chunk.len();
            let mut views: Vec<T> = Vec::with_capacity(b * c * h * w);
            let mut targets: Vec<T> = Vec::with_capacity(b * classes);
            for &pos in chunk {
                let g = train_indices[pos];
                let (crop, probs) = source.labels.record(epoch, g);
                render_view(source.image(g), c, h, w, crop, h, w, &mut rendered);
                views.extend_from_slice(&rendered);
                targets.extend(probs.iter().map(|&p| T::from_f64(p as f64)));
            }
            let x = Tensor::from_vec(views, &[b, c, h, w])?;
            let t = Tensor::from_vec(targets, &[b, classes])?;
            let tape = Tape::new();
            let out = net.forward(&tape, &x, BnMode::Batch { update_running: true }, false)?;
            let loss = soft_cross_entropy(&tape, &out.logits, &t, recipe.temperature)?;
            tape.backward(&loss)?;
            let lv = loss.item().into_f64();
            guard.check(global_step, lv)?;
            epoch_loss += lv * b as f64;
            opt.lr = cosine_lr(recipe.lr, global_step, total_steps)?;
            opt.step(&params);
            for p in &params {
                p.zero_grad();
            }
            global_step += 1;
        }
        on_epoch(epoch, epoch_loss / n as f64, &net)?;
    }
    Ok(net)
}

/// `-log softmax(logits)[label]` per row, computed in f64 off the tape.
pub fn per_sample_ce<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Vec<f64> {
    let shape = logits.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let data = logits.data();
    labels
        .iter()
        .enumerate()
        .take(n)
        .map(|(row, &y)| {
            let vals: Vec<f64> = data[row * c..(row + 1) * c].iter().map(|v| v.into_f64()).collect();
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            logsum - vals[y]
        })
        .collect()
}

fn body<T: Scalar>(ctx: &StageCtx) -> Result<(Vec<MetricRow>, serde_json::Value)> {
    let cfg = ctx.cfg;
    let pt = &cfg.posttrain;
    let seed = cfg.stage_seed(Stage::Posttrain);
    let bundle = crate::pipeline::load_data(cfg)?;
    let recover = ensure_stage(cfg, Stage::Recover)?;
    let relabel = ensure_stage(cfg, Stage::Relabel)?;
    let synth = load_synthset::<T>(&recover.dir.join("synthset"))?;
    let labels = crate::softlabel::load_softlabels(&relabel.dir.join(LABEL_DIR))?;
    let m = synth.manifest.clone();

    let teacher_like = cfg.teacher_spec(m.channels, m.height, m.width, m.classes)?;
    let spec = cfg.student_spec(&teacher_like)?;
    let source = ReplaySource {
        images: &synth.images,
        channels: m.channels,
        height: m.height,
        width: m.width,
        labels: &labels,
    };
    let recipe = StudentRecipe {
        lr: pt.lr,
        weight_decay: pt.weight_decay,
        batch_size: pt.batch_size,
        epochs: pt.epochs,
        temperature: pt.temperature,
    };
    let all: Vec<usize> = (0..synth.len()).collect();
    let mut rows = Vec::new();
    let eval_every = pt.eval_every.max(1);
    let run_id = ctx.run_id.clone();
    let net = {
        let bundle = &bundle;
        let rows = &mut rows;
        train_student(
            &source,
            &all,
            &spec,
            &recipe,
            seed,
            tagged(stage_tag::POSTTRAIN, 0),
            &|epoch| tagged(stage_tag::POSTTRAIN, epoch as u64),
            &mut |epoch, mean_loss, net| {
                rows.push(MetricRow::new(&run_id, seed, "train_loss", epoch as u64, mean_loss));
                if (epoch + 1) % eval_every == 0 && epoch + 1 != recipe.epochs {
                    let top1 = eval_top1(net, &bundle.val, &bundle.norm, 250)?;
                    rows.push(MetricRow::new(&run_id, seed, "val_top1", epoch as u64, top1));
                    println!("[posttrain] epoch {epoch}: loss {mean_loss:.4}, val_top1 {top1:.4}");
                }
                Ok(())
            },
        )?
    };

    let val_top1 = eval_top1(&net, &bundle.val, &bundle.norm, 250)?;
    rows.push(MetricRow::new(&ctx.run_id, seed, "val_top1", pt.epochs as u64 - 1, val_top1));

    let teacher = Network::from_checkpoint(&load_checkpoint::<T>(&teacher_path(cfg)?)?, false)?;
    let sup_gap = sup_loss_gap(&net, &teacher, &bundle.val, &bundle.norm)?;
    rows.push(MetricRow::new(&ctx.run_id, seed, "sup_loss_gap", 0, sup_gap));

    let meta = CheckpointMeta {
        stage: "posttrain".into(),
        dataset: bundle.id.clone(),
        seed,
        epochs: pt.epochs,
        val_top1,
    };
    save_checkpoint(&ctx.dir.join(STUDENT_NAME), &net, meta)?;
    let summary = serde_json::json!({
        "dataset": bundle.id,
        "arch": spec.arch.name(),
        "final_top1": val_top1,
        "teacher_val_top1": m.teacher_val_top1,
        "sup_loss_gap": sup_gap,
        "epochs": pt.epochs,
        "images": synth.len(),
        "ipc": m.ipc,
    });
    Ok((rows, summary))
}

/// Largest per-sample loss gap between student and teacher over the val
/// split, the post-hoc view of how far the student strays from the model
/// that generated its data.
fn sup_loss_gap<T: Scalar>(
    student: &Network<T>,
    teacher: &Network<T>,
    val: &crate::data::LabeledImageSet,
    norm: &crate::data::NormStats,
) -> Result<f64> {
    let (c, h, w) = (val.channels, val.height, val.width);
    let plane = h * w;
    let mut gap: f64 = 0.0;
    let all: Vec<usize> = (0..val.len()).collect();
    for chunk in all.chunks(250) {
        let mut data: Vec<T> = Vec::with_capacity(chunk.len() * c * plane);
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            push_normalized(val.image(i), c, plane, norm, &mut data);
            labels.push(val.labels[i] as usize);
        }
        let x = Tensor::from_vec(data, &[chunk.len(), c, h, w])?;
        let tape = Tape::new();
        let s = student.forward(&tape, &x, BnMode::Running, false)?;
        let t = teacher.forward(&tape, &x, BnMode::Running, false)?;
        let s_ce = per_sample_ce(&s.logits, &labels);
        let t_ce = per_sample_ce(&t.logits, &labels);
        for (a, b) in s_ce.iter().zip(&t_ce) {
            gap = gap.max((a - b).abs());
        }
    }
    Ok(gap)
}
