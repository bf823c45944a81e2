//! Stage execution. Each stage materializes into
//! `output_dir/<stage>/<config-hash>/` and is considered complete once
//! `summary.json` exists; re-running a complete stage is a no-op unless
//! forced. Stages ensure their upstream artifacts exist, running missing
//! ones with the same config.

pub mod ablate;
pub mod continual;
pub mod evaluate;
pub mod posttrain;
pub mod recover;
pub mod relabel;
pub mod reporting;
pub mod squeeze;

use std::path::PathBuf;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use ddistill_core::augment::{cutout, sample_crop, CropParams};
use ddistill_core::nn::{accuracy, BnMode, Network};
use ddistill_core::ops::resize_view_raw;
use ddistill_core::tape::Tape;
use ddistill_core::tensor::Tensor;
use ddistill_core::Scalar;

use crate::config::{artifact_dir, stage_canonical, stage_hash, AugmentSection, RunConfig, Stage};
use crate::data::{DatasetBundle, LabeledImageSet, NormStats};
use crate::error::{Result, ToolError};
use crate::report::{read_summary, write_metrics, write_summary, MetricRow, SUMMARY_NAME};

/// Stream-index namespaces per stage, xor-folded into rng indices so no two
/// stages ever consume the same stream.
pub mod stage_tag {
    pub const SQUEEZE: u64 = 1;
    pub const RECOVER: u64 = 2;
    pub const RELABEL: u64 = 3;
    pub const POSTTRAIN: u64 = 4;
    pub const CONTINUAL: u64 = 5;
}

pub fn tagged(tag: u64, k: u64) -> u64 {
    (tag << 16) | k
}

pub struct StageCtx<'a> {
    pub cfg: &'a RunConfig,
    pub dir: PathBuf,
    pub hash: String,
    pub run_id: String,
}

pub struct StageOutcome {
    pub ran: bool,
    pub dir: PathBuf,
    pub hash: String,
    pub summary: serde_json::Value,
}

const RESOLVED_NAME: &str = "config.resolved.json";

/// Run `body` inside the stage's artifact directory, honoring completion
/// markers. A complete directory whose stored resolved config differs from
/// the current one is a hash collision and refuses to proceed.
pub fn run_stage<F>(cfg: &RunConfig, stage: Stage, force: bool, body: F) -> Result<StageOutcome>
where
    F: FnOnce(&StageCtx) -> Result<(Vec<MetricRow>, serde_json::Value)>,
{
    let dir = artifact_dir(cfg, stage);
    let hash = stage_hash(cfg, stage);
    let canonical = stage_canonical(cfg, stage);
    let marker = dir.join(SUMMARY_NAME);
    if marker.exists() {
        let stored = std::fs::read_to_string(dir.join(RESOLVED_NAME)).unwrap_or_default();
        if stored != canonical {
            return Err(ToolError::validation(format!(
                "{} already holds a different configuration under hash {hash}; \
                 refusing to reuse or overwrite it",
                dir.display()
            )));
        }
        if !force {
            println!("[{}] {hash} already complete, skipping", stage.name());
            let summary = read_summary(&dir)?;
            return Ok(StageOutcome { ran: false, dir, hash, summary });
        }
    }
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(RESOLVED_NAME), &canonical)?;
    let ctx = StageCtx {
        cfg,
        dir: dir.clone(),
        hash: hash.clone(),
        run_id: format!("{}-{}", stage.name(), hash),
    };
    let started = Instant::now();
    let (rows, mut summary) = body(&ctx)?;
    write_metrics(&dir.join(crate::report::METRICS_NAME), &rows)?;
    if let Some(obj) = summary.as_object_mut() {
        obj.insert("wall_clock_s".into(), serde_json::json!(started.elapsed().as_secs_f64()));
        obj.insert("config_hash".into(), serde_json::json!(hash));
        obj.insert("stage".into(), serde_json::json!(stage.name()));
    }
    write_summary(&dir, &summary)?;
    println!("[{}] {hash} done in {:.1}s", stage.name(), started.elapsed().as_secs_f64());
    Ok(StageOutcome { ran: true, dir, hash, summary })
}

/// Run the stage if its artifact is absent; never forces.
pub fn ensure_stage(cfg: &RunConfig, stage: Stage) -> Result<StageOutcome> {
    match stage {
        Stage::Squeeze => squeeze::run(cfg, false),
        Stage::Recover => recover::run(cfg, false),
        Stage::Relabel => relabel::run(cfg, false),
        Stage::Posttrain => posttrain::run(cfg, false),
        _ => Err(ToolError::runtime(format!("{} is not a dependency stage", stage.name()))),
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<DatasetBundle> {
    crate::data::load_bundle(cfg.dataset.kind, &cfg.dataset.dir)
}

/// Watches a scalar training loss; on a non-finite value errors out with the
/// last few values so the blow-up is diagnosable from the message alone.
pub struct LossGuard {
    recent: Vec<f64>,
    context: String,
}

impl LossGuard {
    pub fn new(context: &str) -> Self {
        LossGuard { recent: Vec::new(), context: context.into() }
    }

    pub fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if self.recent.len() == 10 {
            self.recent.remove(0);
        }
        self.recent.push(loss);
        if loss.is_finite() {
            return Ok(());
        }
        Err(ToolError::runtime(format!(
            "{}: non-finite loss at step {step}; last values: {:?}",
            self.context, self.recent
        )))
    }
}

/// Crop/flip/cutout in the raw [0, 1] domain, then normalize, then cast.
/// One sample per index, laid out NCHW in the returned buffer.
pub fn augmented_views<T: Scalar>(
    set: &LabeledImageSet,
    norm: &NormStats,
    indices: &[usize],
    aug: &AugmentSection,
    rng: &mut ChaCha8Rng,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let c = set.channels;
    let per = c * out_h * out_w;
    let mut raw = vec![0f32; per];
    let mut out = Vec::with_capacity(indices.len() * per);
    for &idx in indices {
        let crop = sample_crop(rng, set.height, set.width, aug.crop_lower, aug.crop_upper, aug.flip);
        resize_view_raw(set.image(idx), c, set.height, set.width, &crop, out_h, out_w, &mut raw);
        if aug.cutout > 0.0 {
            cutout(rng, &mut raw, c, out_h, out_w, aug.cutout);
        }
        push_normalized(&raw, c, out_h * out_w, norm, &mut out);
    }
    out
}

/// Normalize raw [0, 1] pixels channel by channel and append as `T`.
pub fn push_normalized<T: Scalar>(
    raw: &[f32],
    channels: usize,
    plane: usize,
    norm: &NormStats,
    out: &mut Vec<T>,
) {
    for ch in 0..channels {
        for &v in &raw[ch * plane..(ch + 1) * plane] {
            out.push(T::from_f64(norm.normalize(ch, v as f64)));
        }
    }
}

/// Render one view of an already-normalized image (synthetic data lives in
/// the normalized domain, so crop/resize applies directly).
pub fn render_view<T: Scalar>(
    image: &[T],
    channels: usize,
    height: usize,
    width: usize,
    crop: &CropParams,
    out_h: usize,
    out_w: usize,
    dst: &mut [T],
) {
    resize_view_raw(image, channels, height, width, crop, out_h, out_w, dst);
}

/// Top-1 accuracy of `net` on the listed samples, running statistics mode,
/// no augmentation. Images must already match the model input size.
pub fn eval_top1_subset<T: Scalar>(
    net: &Network<T>,
    set: &LabeledImageSet,
    norm: &NormStats,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let spec = net.spec();
    if set.height != spec.image_h || set.width != spec.image_w || set.channels != spec.in_channels
    {
        return Err(ToolError::validation(format!(
            "evaluation images are {}x{}x{}, model expects {}x{}x{}",
            set.channels, set.height, set.width, spec.in_channels, spec.image_h, spec.image_w
        )));
    }
    let per = set.pixels_per_image();
    let plane = set.height * set.width;
    let mut correct_weighted = 0.0;
    let mut seen = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut data: Vec<T> = Vec::with_capacity(chunk.len() * per);
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            push_normalized(set.image(i), set.channels, plane, norm, &mut data);
            labels.push(set.labels[i] as usize);
        }
        let x = Tensor::from_vec(data, &[chunk.len(), set.channels, set.height, set.width])?;
        let tape = Tape::new();
        let out = net.forward(&tape, &x, BnMode::Running, false)?;
        correct_weighted += accuracy(&out.logits, &labels) * chunk.len() as f64;
        seen += chunk.len();
    }
    if seen == 0 {
        return Err(ToolError::validation("evaluation set is empty"));
    }
    Ok(correct_weighted / seen as f64)
}

pub fn eval_top1<T: Scalar>(
    net: &Network<T>,
    set: &LabeledImageSet,
    norm: &NormStats,
    batch_size: usize,
) -> Result<f64> {
    let all: Vec<usize> = (0..set.len()).collect();
    eval_top1_subset(net, set, norm, &all, batch_size)
}

/// Teacher probability rows `softmax(logits / temperature)`, computed in
/// f64 and stored as f32 (the on-disk label precision).
pub fn softmax_rows_f32<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Vec<f32> {
    let shape = logits.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let data = logits.data();
    let mut out = Vec::with_capacity(n * c);
    for row in 0..n {
        let vals: Vec<f64> =
            data[row * c..(row + 1) * c].iter().map(|v| v.into_f64() / temperature).collect();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    out
}
