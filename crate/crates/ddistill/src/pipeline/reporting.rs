//! Aggregation: walk the artifact tree, flatten every stage summary into
//! one CSV, and export the active curriculum schedule. Reads everything,
//! mutates nothing outside its own artifact directory.

use std::fmt::Write as _;
use std::path::Path;

use ddistill_core::augment::schedule_curve;

use crate::config::{RunConfig, Stage};
use crate::error::Result;
use crate::pipeline::{run_stage, StageCtx, StageOutcome};
use crate::report::{read_summary, MetricRow, SUMMARY_NAME};

pub const RUNS_NAME: &str = "all_runs.csv";
pub const SCHEDULE_NAME: &str = "schedule.csv";

pub fn run(cfg: &RunConfig, force: bool) -> Result<StageOutcome> {
    run_stage(cfg, Stage::Report, force, body)
}

fn flatten(prefix: &str, value: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        serde_json::Value::Null => {}
        other => {
            let text = match other {
                serde_json::Value::String(s) => s.clone(),
                v => v.to_string(),
            };
            out.push((prefix.to_string(), text));
        }
    }
}

fn body(ctx: &StageCtx) -> Result<(Vec<MetricRow>, serde_json::Value)> {
    let cfg = ctx.cfg;
    let mut csv = String::from("stage,hash,key,value\n");
    let mut per_stage: Vec<(String, usize)> = Vec::new();
    for stage in [
        Stage::Squeeze,
        Stage::Recover,
        Stage::Relabel,
        Stage::Posttrain,
        Stage::Eval,
        Stage::Continual,
        Stage::Ablate,
    ] {
        let stage_dir = cfg.run.output_dir.join(stage.name());
        let mut count = 0usize;
        for entry in read_dir_sorted(&stage_dir)? {
            if !entry.join(SUMMARY_NAME).exists() {
                continue;
            }
            let hash = entry.file_name().map(|h| h.to_string_lossy().into_owned()).unwrap_or_default();
            let summary = read_summary(&entry)?;
            let mut fields = Vec::new();
            flatten("", &summary, &mut fields);
            for (key, value) in fields {
                if key.contains(',') || value.contains(',') {
                    continue;
                }
                writeln!(csv, "{},{hash},{key},{value}", stage.name()).expect("write to string");
            }
            count += 1;
        }
        per_stage.push((stage.name().to_string(), count));
    }
    std::fs::write(ctx.dir.join(RUNS_NAME), csv)?;

    let cc = cfg.curriculum.to_config(cfg.recovery.iterations, cfg.recovery.flip)?;
    let mut schedule = String::from("step,alpha\n");
    for (step, alpha) in schedule_curve(&cc) {
        writeln!(schedule, "{step},{}", crate::report::fmt_value(alpha)).expect("write to string");
    }
    std::fs::write(ctx.dir.join(SCHEDULE_NAME), schedule)?;

    let rows: Vec<MetricRow> = per_stage
        .iter()
        .map(|(name, n)| MetricRow::new(&ctx.run_id, cfg.run.seed, &format!("runs_{name}"), 0, *n as f64))
        .collect();
    let counts: serde_json::Map<String, serde_json::Value> = per_stage
        .into_iter()
        .map(|(name, n)| (name, serde_json::json!(n)))
        .collect();
    let summary = serde_json::json!({
        "runs": counts,
        "schedule_csv": SCHEDULE_NAME,
        "all_runs_csv": RUNS_NAME,
    });
    Ok((rows, summary))
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
