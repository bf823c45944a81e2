//! Synthesis: optimize a batch of images so the frozen teacher classifies
//! them as their assigned labels while their batch statistics reproduce the
//! teacher's running BN statistics. Crop difficulty follows the curriculum
//! schedule; each batch gets its own Adam run over the full iteration
//! budget.
//!
//! Two gradient paths are available. `end_to_end` keeps the full image as
//! the optimized leaf and differentiates through the crop/resize render.
//! `paste_back` optimizes the rendered view buffer directly (Adam state
//! lives on the view) and writes the updated pixels back into the crop
//! rectangle after every step.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use ddistill_core::augment::{reverse_paste, sample_curriculum_crop, CropParams};
use ddistill_core::nn::{
    bn_matching_loss, one_hot_targets, soft_cross_entropy, BnMode, Network,
};
use ddistill_core::optim::{cosine_lr, Adam};
use ddistill_core::ops::{add, crop_resize, scale};
use ddistill_core::rng::{purpose, stream_rng};
use ddistill_core::tape::Tape;
use ddistill_core::tensor::Tensor;
use ddistill_core::Scalar;

use crate::checkpoint::{fingerprint, load_checkpoint};
use crate::config::{RunConfig, Stage};
use crate::error::{Result, ToolError};
use crate::pipeline::{
    ensure_stage, load_data, render_view, run_stage, stage_tag, tagged, LossGuard, StageCtx,
    StageOutcome,
};
use crate::report::MetricRow;
use crate::synthset::{save_synthset, SynthManifest, SynthSet, BLOB_NAME, VERSION};

pub const TRACE_NAME: &str = "loss_trace.csv";

pub fn run(cfg: &RunConfig, force: bool) -> Result<StageOutcome> {
    match cfg.run.precision.as_str() {
        "f64" => run_stage(cfg, Stage::Recover, force, body::<f64>),
        _ => run_stage(cfg, Stage::Recover, force, body::<f32>),
    }
}

/// The teacher checkpoint is either named explicitly or produced by the
/// squeeze stage on demand.
pub fn teacher_path(cfg: &RunConfig) -> Result<std::path::PathBuf> {
    if !cfg.recovery.teacher.is_empty() {
        let path = std::path::PathBuf::from(&cfg.recovery.teacher);
        if !path.exists() {
            return Err(ToolError::validation(format!(
                "teacher checkpoint {} does not exist",
                path.display()
            )));
        }
        return Ok(path);
    }
    let squeeze = ensure_stage(cfg, Stage::Squeeze)?;
    Ok(squeeze.dir.join(super::squeeze::TEACHER_NAME))
}

struct BatchStats {
    first_total: f64,
    last_total: f64,
    first_rreg: f64,
    last_rreg: f64,
    last_ce: f64,
}

fn body<T: Scalar>(ctx: &StageCtx) -> Result<(Vec<MetricRow>, serde_json::Value)> {
    let cfg = ctx.cfg;
    let rec = &cfg.recovery;
    let seed = cfg.stage_seed(Stage::Recover);
    let bundle = load_data(cfg)?;
    let (c, h, w) = (bundle.train.channels, bundle.train.height, bundle.train.width);
    let classes = bundle.train.classes;

    let tpath = teacher_path(cfg)?;
    let ckpt = load_checkpoint::<T>(&tpath)?;
    let teacher_top1 = ckpt.meta.val_top1;
    let net = Network::from_checkpoint(&ckpt, false)?;
    let spec = net.spec().clone();
    if spec.in_channels != c || spec.image_h != h || spec.image_w != w || spec.classes != classes {
        return Err(ToolError::validation(format!(
            "teacher was trained for {}x{}x{} with {} classes, dataset is {}x{}x{} with {}",
            spec.in_channels, spec.image_h, spec.image_w, spec.classes, c, h, w, classes
        )));
    }
    let bn_targets = net.bn_targets();
    let curriculum = cfg.curriculum.to_config(rec.iterations, rec.flip)?;

    let total = rec.ipc * classes;
    let per = c * h * w;
    let mut synth = vec![T::zero(); total * per];
    let labels: Vec<u32> = (0..total).map(|g| (g % classes) as u32).collect();

    let mut rows = Vec::new();
    let mut trace = String::from("batch,iteration,ce,r_reg,total\n");
    let mut guard = LossGuard::new("recover");
    let mut batch_stats: Vec<BatchStats> = Vec::new();

    let indices: Vec<usize> = (0..total).collect();
    for (batch_idx, chunk) in indices.chunks(rec.batch_size).enumerate() {
        let b = chunk.len();
        let batch_labels: Vec<usize> = chunk.iter().map(|&g| g % classes).collect();
        let targets = one_hot_targets::<T>(&batch_labels, classes, 0.0)?;

        let mut init: Vec<T> = Vec::with_capacity(b * per);
        for &g in chunk {
            let mut rng = stream_rng(seed, purpose::SYNTH_INIT, g as u64);
            init.extend((0..per).map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                T::from_f64(v)
            }));
        }

        let mut aug_rng =
            stream_rng(seed, purpose::AUGMENT, tagged(stage_tag::RECOVER, batch_idx as u64));
        let mut opt = Adam::new(rec.lr, rec.beta1, rec.beta2, 1e-8);
        let mut stats = None;

        let finished: Vec<T> = if rec.gradient_mode == "paste_back" {
            let mut full = init;
            let view = Tensor::param_from_vec(vec![T::zero(); b * per], &[b, c, h, w])?;
            let mut rendered = vec![T::zero(); per];
            for s in 0..rec.iterations {
                let crops: Vec<CropParams> = (0..b)
                    .map(|_| sample_curriculum_crop(&mut aug_rng, &curriculum, s, h, w))
                    .collect();
                let mut view_data = Vec::with_capacity(b * per);
                for (i, crop) in crops.iter().enumerate() {
                    render_view(&full[i * per..(i + 1) * per], c, h, w, crop, h, w, &mut rendered);
                    view_data.extend_from_slice(&rendered);
                }
                view.set_data(view_data)?;
                let tape = Tape::new();
                let out = net.forward(&tape, &view, BnMode::Batch { update_running: false }, true)?;
                let snapshot = out.bn_stats.as_ref().expect("bn stats captured");
                let ce = soft_cross_entropy(&tape, &out.logits, &targets, 1.0)?;
                let rreg = bn_matching_loss(&tape, snapshot, &bn_targets)?;
                let total_loss = add(&tape, &ce, &scale(&tape, &rreg, T::from_f64(rec.alpha_bn))?)?;
                tape.backward(&total_loss)?;
                let (cev, rv, tv) =
                    (ce.item().into_f64(), rreg.item().into_f64(), total_loss.item().into_f64());
                guard.check(s, tv)?;
                record(&mut trace, &mut stats, batch_idx, s, cev, rv, tv);
                opt.lr = cosine_lr(rec.lr, s, rec.iterations)?;
                opt.step(core::slice::from_ref(&view));
                view.zero_grad();
                {
                    let vd = view.data();
                    for (i, crop) in crops.iter().enumerate() {
                        reverse_paste(
                            &mut full[i * per..(i + 1) * per],
                            c,
                            h,
                            w,
                            &vd[i * per..(i + 1) * per],
                            h,
                            w,
                            crop,
                        );
                    }
                }
            }
            full
        } else {
            let images = Tensor::param_from_vec(init, &[b, c, h, w])?;
            for s in 0..rec.iterations {
                let crops: Vec<CropParams> = (0..b)
                    .map(|_| sample_curriculum_crop(&mut aug_rng, &curriculum, s, h, w))
                    .collect();
                let tape = Tape::new();
                let views = crop_resize(&tape, &images, &crops, h, w)?;
                let out =
                    net.forward(&tape, &views, BnMode::Batch { update_running: false }, true)?;
                let snapshot = out.bn_stats.as_ref().expect("bn stats captured");
                let ce = soft_cross_entropy(&tape, &out.logits, &targets, 1.0)?;
                let rreg = bn_matching_loss(&tape, snapshot, &bn_targets)?;
                let total_loss = add(&tape, &ce, &scale(&tape, &rreg, T::from_f64(rec.alpha_bn))?)?;
                tape.backward(&total_loss)?;
                let (cev, rv, tv) =
                    (ce.item().into_f64(), rreg.item().into_f64(), total_loss.item().into_f64());
                guard.check(s, tv)?;
                record(&mut trace, &mut stats, batch_idx, s, cev, rv, tv);
                opt.lr = cosine_lr(rec.lr, s, rec.iterations)?;
                opt.step(core::slice::from_ref(&images));
                images.zero_grad();
            }
            images.to_vec()
        };

        for (i, &g) in chunk.iter().enumerate() {
            synth[g * per..(g + 1) * per].copy_from_slice(&finished[i * per..(i + 1) * per]);
        }
        let stats = stats.expect("at least one iteration ran");
        rows.push(MetricRow::new(&ctx.run_id, seed, "total_first", batch_idx as u64, stats.first_total));
        rows.push(MetricRow::new(&ctx.run_id, seed, "total_last", batch_idx as u64, stats.last_total));
        rows.push(MetricRow::new(&ctx.run_id, seed, "r_reg_first", batch_idx as u64, stats.first_rreg));
        rows.push(MetricRow::new(&ctx.run_id, seed, "r_reg_last", batch_idx as u64, stats.last_rreg));
        println!(
            "[recover] batch {batch_idx}: total {:.4} -> {:.4}, r_reg {:.4} -> {:.4}",
            stats.first_total, stats.last_total, stats.first_rreg, stats.last_rreg
        );
        batch_stats.push(stats);
    }

    std::fs::write(ctx.dir.join(TRACE_NAME), trace)?;

    let manifest = SynthManifest {
        version: VERSION,
        dtype: T::DTYPE.into(),
        dataset: bundle.id.clone(),
        classes,
        ipc: rec.ipc,
        channels: c,
        height: h,
        width: w,
        labels,
        norm: bundle.norm.clone(),
        teacher_fingerprint: fingerprint(&tpath)?,
        teacher_val_top1: teacher_top1,
        seed,
        config_hash: ctx.hash.clone(),
        blob: BLOB_NAME.into(),
    };
    save_synthset(&ctx.dir.join("synthset"), &SynthSet { manifest, images: synth })?;

    let batches = batch_stats.len();
    let improved_total = batch_stats.iter().filter(|s| s.last_total < s.first_total).count();
    let improved_rreg = batch_stats.iter().filter(|s| s.last_rreg < s.first_rreg).count();
    let mean_last_ce = batch_stats.iter().map(|s| s.last_ce).sum::<f64>() / batches as f64;
    let mean_last_rreg = batch_stats.iter().map(|s| s.last_rreg).sum::<f64>() / batches as f64;
    let summary = serde_json::json!({
        "dataset": bundle.id,
        "images": total,
        "batches": batches,
        "batches_total_improved": improved_total,
        "batches_rreg_improved": improved_rreg,
        "mean_last_ce": mean_last_ce,
        "mean_last_rreg": mean_last_rreg,
        "teacher_val_top1": teacher_top1,
        "gradient_mode": rec.gradient_mode,
    });
    Ok((rows, summary))
}

#[allow(clippy::too_many_arguments)]
fn record(
    trace: &mut String,
    stats: &mut Option<BatchStats>,
    batch: usize,
    iter: usize,
    ce: f64,
    rreg: f64,
    total: f64,
) {
    writeln!(
        trace,
        "{batch},{iter},{},{},{}",
        crate::report::fmt_value(ce),
        crate::report::fmt_value(rreg),
        crate::report::fmt_value(total)
    )
    .expect("write to string");
    match stats {
        None => {
            *stats = Some(BatchStats {
                first_total: total,
                last_total: total,
                first_rreg: rreg,
                last_rreg: rreg,
                last_ce: ce,
            })
        }
        Some(s) => {
            s.last_total = total;
            s.last_rreg = rreg;
            s.last_ce = ce;
        }
    }
}
