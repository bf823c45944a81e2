//! Standalone evaluation of a stored checkpoint on the real train or val
//! split.

use ddistill_core::nn::Network;

use crate::checkpoint::{fingerprint, load_checkpoint};
use crate::config::{RunConfig, Stage};
use crate::error::{Result, ToolError};
use crate::pipeline::{eval_top1, load_data, run_stage, StageCtx, StageOutcome};
use crate::report::MetricRow;

pub fn run(cfg: &RunConfig, force: bool) -> Result<StageOutcome> {
    match cfg.run.precision.as_str() {
        "f64" => run_stage(cfg, Stage::Eval, force, body::<f64>),
        _ => run_stage(cfg, Stage::Eval, force, body::<f32>),
    }
}

fn body<T: ddistill_core::Scalar>(
    ctx: &StageCtx,
) -> Result<(Vec<MetricRow>, serde_json::Value)> {
    let cfg = ctx.cfg;
    if cfg.eval.checkpoint.is_empty() {
        return Err(ToolError::validation("eval.checkpoint is not set"));
    }
    let path = std::path::PathBuf::from(&cfg.eval.checkpoint);
    if !path.exists() {
        return Err(ToolError::validation(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let ckpt = load_checkpoint::<T>(&path)?;
    let net = Network::from_checkpoint(&ckpt, false)?;
    let bundle = load_data(cfg)?;
    let set = match cfg.eval.split.as_str() {
        "train" => &bundle.train,
        "" | "val" => &bundle.val,
        other => {
            return Err(ToolError::validation(format!(
                "eval.split must be train or val, got {other:?}"
            )))
        }
    };
    let top1 = eval_top1(&net, set, &bundle.norm, 250)?;
    println!("[eval] {} on {}: top1 {:.4}", path.display(), bundle.id, top1);
    let rows = vec![MetricRow::new(&ctx.run_id, cfg.run.seed, "top1", 0, top1)];
    let summary = serde_json::json!({
        "checkpoint": path.display().to_string(),
        "fingerprint": fingerprint(&path)?,
        "dataset": bundle.id,
        "split": if cfg.eval.split.is_empty() { "val" } else { cfg.eval.split.as_str() },
        "top1": top1,
        "meta_stage": ckpt.meta.stage,
        "meta_val_top1": ckpt.meta.val_top1,
    });
    Ok((rows, summary))
}
