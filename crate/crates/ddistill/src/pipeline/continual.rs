//! Class-incremental study: classes arrive in random groups; at every step
//! a fresh student trains on the memory restricted to the classes seen so
//! far and is scored on the val split of those classes. Two memory arms run
//! under identical budgets and identical label treatment (teacher soft
//! labels): the distilled images versus a random real subset of the same
//! images-per-class.

use std::fmt::Write as _;

use ddistill_core::augment::{sample_crop, CropParams};
use ddistill_core::nn::{BnMode, Network};
use ddistill_core::rng::{purpose, stream_rng};
use ddistill_core::tape::Tape;
use ddistill_core::tensor::Tensor;
use ddistill_core::Scalar;

use crate::checkpoint::load_checkpoint;
use crate::config::{RunConfig, Stage};
use crate::data::{incremental_split, random_real_subset, LabeledImageSet};
use crate::error::{Result, ToolError};
use crate::pipeline::posttrain::{train_student, ReplaySource, StudentRecipe};
use crate::pipeline::recover::teacher_path;
use crate::pipeline::relabel::LABEL_DIR;
use crate::pipeline::{
    ensure_stage, eval_top1_subset, push_normalized, run_stage, softmax_rows_f32, stage_tag,
    StageCtx, StageOutcome,
};
use crate::report::MetricRow;
use crate::softlabel::{SoftLabelManifest, SoftLabelSet};
use crate::synthset::load_synthset;

pub const STEPS_NAME: &str = "continual_steps.csv";

const ARM_DISTILLED: u64 = 0;
const ARM_REAL: u64 = 1;

/// Wide stream indices so (arm, step, epoch) triples never collide with the
/// 16-bit tagged() namespace other stages use.
fn cont_idx(arm: u64, step: usize, epoch: usize) -> u64 {
    (stage_tag::CONTINUAL << 32) | (arm << 24) | ((step as u64) << 16) | epoch as u64
}

pub fn run(cfg: &RunConfig, force: bool) -> Result<StageOutcome> {
    match cfg.run.precision.as_str() {
        "f64" => run_stage(cfg, Stage::Continual, force, body::<f64>),
        _ => run_stage(cfg, Stage::Continual, force, body::<f32>),
    }
}

fn body<T: Scalar>(ctx: &StageCtx) -> Result<(Vec<MetricRow>, serde_json::Value)> {
    let cfg = ctx.cfg;
    let ct = &cfg.continual;
    let seed = cfg.stage_seed(Stage::Continual);
    let bundle = crate::pipeline::load_data(cfg)?;
    let classes = bundle.train.classes;

    let recover = ensure_stage(cfg, Stage::Recover)?;
    let relabel = ensure_stage(cfg, Stage::Relabel)?;
    let synth = load_synthset::<T>(&recover.dir.join("synthset"))?;
    let stored = crate::softlabel::load_softlabels(&relabel.dir.join(LABEL_DIR))?;
    if ct.epochs > stored.manifest.epochs {
        return Err(ToolError::validation(format!(
            "continual.epochs = {} exceeds the {} stored label epochs; raise relabel.epochs",
            ct.epochs, stored.manifest.epochs
        )));
    }
    if synth.manifest.ipc != ct.ipc {
        return Err(ToolError::validation(format!(
            "continual.ipc = {} but the distilled set holds {} per class; align recovery.ipc",
            ct.ipc, synth.manifest.ipc
        )));
    }
    let m = synth.manifest.clone();
    let (c, h, w) = (m.channels, m.height, m.width);

    let schedule = incremental_split(classes, ct.steps, seed)?;
    let teacher = Network::from_checkpoint(&load_checkpoint::<T>(&teacher_path(cfg)?)?, false)?;

    let real = random_real_subset(&bundle.train, ct.ipc, seed)?;
    let (real_images, real_labels) =
        relabel_real(&real, &bundle.norm, &teacher, cfg, seed, ctx)?;

    let teacher_like = cfg.teacher_spec(c, h, w, classes)?;
    let spec = cfg.student_spec(&teacher_like)?;
    let recipe = StudentRecipe {
        lr: cfg.posttrain.lr,
        weight_decay: cfg.posttrain.weight_decay,
        batch_size: ct.batch_size,
        epochs: ct.epochs,
        temperature: cfg.posttrain.temperature,
    };

    let mut rows = Vec::new();
    let mut steps_csv = String::from("step,classes_seen,top1_distilled,top1_random_real\n");
    let mut finals = (0.0, 0.0);
    for step in 0..ct.steps {
        let seen = schedule.seen(step);
        let seen_set: std::collections::HashSet<usize> = seen.iter().copied().collect();
        let val_idx: Vec<usize> = (0..bundle.val.len())
            .filter(|&i| seen_set.contains(&(bundle.val.labels[i] as usize)))
            .collect();

        let mut top1 = [0.0f64; 2];
        for (arm, (images, labels, arm_name)) in [
            (ARM_DISTILLED, (&synth.images, &stored, "distilled")),
            (ARM_REAL, (&real_images, &real_labels, "random_real")),
        ] {
            let source = ReplaySource {
                images: images.as_slice(),
                channels: c,
                height: h,
                width: w,
                labels,
            };
            let train_idx: Vec<usize> = (0..source.labels.manifest.images)
                .filter(|&i| {
                    let label = if arm == ARM_DISTILLED {
                        m.labels[i] as usize
                    } else {
                        real.labels[i] as usize
                    };
                    seen_set.contains(&label)
                })
                .collect();
            let net = train_student(
                &source,
                &train_idx,
                &spec,
                &recipe,
                seed,
                cont_idx(arm, step, 0xffff),
                &|epoch| cont_idx(arm, step, epoch),
                &mut |_, _, _| Ok(()),
            )?;
            let acc = eval_top1_subset(&net, &bundle.val, &bundle.norm, &val_idx, 250)?;
            top1[arm as usize] = acc;
            rows.push(MetricRow::new(
                &ctx.run_id,
                seed,
                &format!("top1_{arm_name}"),
                seen.len() as u64,
                acc,
            ));
        }
        writeln!(
            steps_csv,
            "{step},{},{},{}",
            seen.len(),
            crate::report::fmt_value(top1[0]),
            crate::report::fmt_value(top1[1])
        )
        .expect("write to string");
        println!(
            "[continual] step {step} ({} classes): distilled {:.4}, random_real {:.4}",
            seen.len(),
            top1[0],
            top1[1]
        );
        finals = (top1[0], top1[1]);
    }
    std::fs::write(ctx.dir.join(STEPS_NAME), steps_csv)?;

    let summary = serde_json::json!({
        "dataset": bundle.id,
        "steps": ct.steps,
        "ipc": ct.ipc,
        "final_top1_distilled": finals.0,
        "final_top1_random_real": finals.1,
        "distilled_wins_final": finals.0 > finals.1,
    });
    Ok((rows, summary))
}

/// Give the random-real arm the same treatment the distilled arm got: for
/// every epoch, sample a crop per image and store the teacher's soft label
/// for exactly that view.
fn relabel_real<T: Scalar>(
    real: &LabeledImageSet,
    norm: &crate::data::NormStats,
    teacher: &Network<T>,
    cfg: &RunConfig,
    seed: u64,
    ctx: &StageCtx,
) -> Result<(Vec<T>, SoftLabelSet)> {
    let (c, h, w) = (real.channels, real.height, real.width);
    let per = c * h * w;
    let plane = h * w;
    let mut normalized: Vec<T> = Vec::with_capacity(real.len() * per);
    for i in 0..real.len() {
        push_normalized(real.image(i), c, plane, norm, &mut normalized);
    }
    let epochs = cfg.continual.epochs;
    let manifest = SoftLabelManifest {
        version: crate::softlabel::VERSION,
        epochs,
        images: real.len(),
        classes: real.classes,
        view_height: h,
        view_width: w,
        temperature: cfg.relabel.temperature,
        crop_lower: cfg.relabel.crop_lower,
        crop_upper: cfg.relabel.crop_upper,
        flip: cfg.relabel.flip,
        teacher_fingerprint: String::new(),
        seed,
        config_hash: ctx.hash.clone(),
        blob: String::new(),
    };
    let mut labels = SoftLabelSet::new(manifest);
    let mut rendered = vec![T::zero(); per];
    for epoch in 0..epochs {
        let mut rng = stream_rng(seed, purpose::AUGMENT, cont_idx(ARM_REAL, 0x7f, epoch));
        let crops: Vec<CropParams> = (0..real.len())
            .map(|_| {
                sample_crop(&mut rng, h, w, cfg.relabel.crop_lower, cfg.relabel.crop_upper, cfg.relabel.flip)
            })
            .collect();
        for start in (0..real.len()).step_by(250) {
            let end = (start + 250).min(real.len());
            let mut views: Vec<T> = Vec::with_capacity((end - start) * per);
            for i in start..end {
                crate::pipeline::render_view(
                    &normalized[i * per..(i + 1) * per],
                    c,
                    h,
                    w,
                    &crops[i],
                    h,
                    w,
                    &mut rendered,
                );
                views.extend_from_slice(&rendered);
            }
            let x = Tensor::from_vec(views, &[end - start, c, h, w])?;
            let tape = Tape::new();
            let out = teacher.forward(&tape, &x, BnMode::Running, false)?;
            let probs = softmax_rows_f32(&out.logits, cfg.relabel.temperature);
            for i in start..end {
                let row = &probs[(i - start) * real.classes..(i - start + 1) * real.classes];
                labels.push(crops[i], row)?;
            }
        }
    }
    Ok((normalized, labels))
}
