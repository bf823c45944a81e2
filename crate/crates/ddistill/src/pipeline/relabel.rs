//! Label generation: for every post-training epoch, sample the crop each
//! synthetic image will be shown with, run the frozen teacher on exactly
//! that view, and store (crop, soft probabilities). Post-training then
//! replays the file without ever touching the teacher.

use ddistill_core::augment::{sample_crop, CropParams};
use ddistill_core::nn::{BnMode, Network};
use ddistill_core::rng::{purpose, stream_rng};
use ddistill_core::tape::Tape;
use ddistill_core::tensor::Tensor;
use ddistill_core::Scalar;

use crate::checkpoint::{fingerprint, load_checkpoint};
use crate::config::{RunConfig, Stage};
use crate::error::{Result, ToolError};
use crate::pipeline::recover::teacher_path;
use crate::pipeline::{
    ensure_stage, render_view, run_stage, softmax_rows_f32, stage_tag, tagged, StageCtx,
    StageOutcome,
};
use crate::report::MetricRow;
use crate::softlabel::{save_softlabels, SoftLabelManifest, SoftLabelSet, BLOB_NAME, VERSION};
use crate::synthset::load_synthset;

pub const LABEL_DIR: &str = "softlabels";
const FORWARD_CHUNK: usize = 250;

pub fn run(cfg: &RunConfig, force: bool) -> Result<StageOutcome> {
    match cfg.run.precision.as_str() {
        "f64" => run_stage(cfg, Stage::Relabel, force, body::<f64>),
        _ => run_stage(cfg, Stage::Relabel, force, body::<f32>),
    }
}

fn body<T: Scalar>(ctx: &StageCtx) -> Result<(Vec<MetricRow>, serde_json::Value)> {
    let cfg = ctx.cfg;
    let seed = cfg.stage_seed(Stage::Relabel);
    let recover = ensure_stage(cfg, Stage::Recover)?;
    let synth = load_synthset::<T>(&recover.dir.join("synthset"))?;
    let m = &synth.manifest;

    let tpath = teacher_path(cfg)?;
    if fingerprint(&tpath)? != m.teacher_fingerprint {
        return Err(ToolError::validation(format!(
            "teacher {} does not match the one the images were recovered against",
            tpath.display()
        )));
    }
    let net = Network::from_checkpoint(&load_checkpoint::<T>(&tpath)?, false)?;
    let (c, h, w) = (m.channels, m.height, m.width);
    let epochs = cfg.relabel_epochs();

    let manifest = SoftLabelManifest {
        version: VERSION,
        epochs,
        images: synth.len(),
        classes: m.classes,
        view_height: h,
        view_width: w,
        temperature: cfg.relabel.temperature,
        crop_lower: cfg.relabel.crop_lower,
        crop_upper: cfg.relabel.crop_upper,
        flip: cfg.relabel.flip,
        teacher_fingerprint: m.teacher_fingerprint.clone(),
        seed,
        config_hash: ctx.hash.clone(),
        blob: BLOB_NAME.into(),
    };
    let mut labels = SoftLabelSet::new(manifest);
    let mut rendered = vec![T::zero(); c * h * w];
    let mut top_prob_sum = 0.0;
    let mut agree = 0usize;

    for epoch in 0..epochs {
        let mut rng =
            stream_rng(seed, purpose::AUGMENT, tagged(stage_tag::RELABEL, epoch as u64));
        let crops: Vec<CropParams> = (0..synth.len())
            .map(|_| {
                sample_crop(&mut rng, h, w, cfg.relabel.crop_lower, cfg.relabel.crop_upper, cfg.relabel.flip)
            })
            .collect();
        for start in (0..synth.len()).step_by(FORWARD_CHUNK) {
            let end = (start + FORWARD_CHUNK).min(synth.len());
            let mut views: Vec<T> = Vec::with_capacity((end - start) * c * h * w);
            for i in start..end {
                render_view(synth.image(i), c, h, w, &crops[i], h, w, &mut rendered);
                views.extend_from_slice(&rendered);
            }
            let x = Tensor::from_vec(views, &[end - start, c, h, w])?;
            let tape = Tape::new();
            let out = net.forward(&tape, &x, BnMode::Running, false)?;
            let probs = softmax_rows_f32(&out.logits, cfg.relabel.temperature);
            for i in start..end {
                let row = &probs[(i - start) * m.classes..(i - start + 1) * m.classes];
                let (argmax, top) = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |acc, (j, &p)| if p > acc.1 { (j, p) } else { acc });
                top_prob_sum += top as f64;
                if argmax as u32 == m.labels[i] {
                    agree += 1;
                }
                labels.push(crops[i], row)?;
            }
        }
    }

    save_softlabels(&ctx.dir.join(LABEL_DIR), &labels)?;
    let records = (epochs * synth.len()) as f64;
    let rows = vec![
        MetricRow::new(&ctx.run_id, seed, "mean_top_prob", 0, top_prob_sum / records),
        MetricRow::new(&ctx.run_id, seed, "teacher_agreement", 0, agree as f64 / records),
    ];
    let summary = serde_json::json!({
        "epochs": epochs,
        "images": synth.len(),
        "records": epochs * synth.len(),
        "mean_top_prob": top_prob_sum / records,
        "teacher_agreement": agree as f64 / records,
    });
    Ok((rows, summary))
}
