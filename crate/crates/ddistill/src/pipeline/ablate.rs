//! Ablation grids. Every cell is a full squeeze/recover/relabel/posttrain
//! chain under a perturbed configuration; stage-scoped hashing makes the
//! cells share whatever artifacts their configs agree on (one teacher for
//! the whole grid, one recovery per curriculum setting, and so on). The
//! grid CSV always contains every cell, written only after all complete.

use std::fmt::Write as _;

use ddistill_core::augment::schedule_curve;

use crate::config::{RunConfig, Stage};
use crate::error::{Result, ToolError};
use crate::pipeline::{ensure_stage, run_stage, StageCtx, StageOutcome};
use crate::report::{summary_f64, MetricRow};

pub const GRID_NAME: &str = "grid.csv";

pub fn run(cfg: &RunConfig, force: bool) -> Result<StageOutcome> {
    run_stage(cfg, Stage::Ablate, force, body)
}

/// One grid cell: label columns (already formatted) plus the seed to run.
struct Cell {
    labels: Vec<String>,
    seed: u64,
    cfg: RunConfig,
}

fn student_top1(cell_cfg: &RunConfig) -> Result<f64> {
    let outcome = ensure_stage(cell_cfg, Stage::Posttrain)?;
    summary_f64(&outcome.summary, "final_top1")
}

fn body(ctx: &StageCtx) -> Result<(Vec<MetricRow>, serde_json::Value)> {
    let cfg = ctx.cfg;
    let ab = &cfg.ablate;
    if ab.seeds.is_empty() {
        return Err(ToolError::validation("ablate.seeds must not be empty"));
    }
    let mut header = String::new();
    let mut cells: Vec<Cell> = Vec::new();
    let mut curves: Vec<(String, f64)> = Vec::new();

    match ab.kind.as_str() {
        "scheduler" => {
            header.push_str("scheduler,milestone,seed,top1");
            for sched in &ab.schedulers {
                for &m in &ab.milestones {
                    curves.push((sched.clone(), m));
                    for &s in &ab.seeds {
                        let mut c = cfg.clone();
                        c.curriculum.scheduler = sched.clone();
                        c.curriculum.milestone = m;
                        c.posttrain.seed = s;
                        cells.push(Cell {
                            labels: vec![sched.clone(), format!("{m}")],
                            seed: s,
                            cfg: c,
                        });
                    }
                }
            }
        }
        "rcl" => {
            header.push_str("scheduler,milestone,seed,top1");
            let mut variants: Vec<(String, f64)> =
                ab.milestones.iter().map(|&m| ("reverse_step".to_string(), m)).collect();
            variants.push(("cosine".to_string(), 1.0));
            for (sched, m) in variants {
                curves.push((sched.clone(), m));
                for &s in &ab.seeds {
                    let mut c = cfg.clone();
                    c.curriculum.scheduler = sched.clone();
                    c.curriculum.milestone = m;
                    c.posttrain.seed = s;
                    cells.push(Cell {
                        labels: vec![sched.clone(), format!("{m}")],
                        seed: s,
                        cfg: c,
                    });
                }
            }
        }
        "ctl" => {
            header.push_str("alpha,seed,top1");
            for &alpha in &ab.alphas {
                for &s in &ab.seeds {
                    let mut c = cfg.clone();
                    c.curriculum.scheduler = "constant".into();
                    c.curriculum.lower = alpha;
                    c.posttrain.seed = s;
                    cells.push(Cell { labels: vec![format!("{alpha}")], seed: s, cfg: c });
                }
            }
        }
        "batch_size" => {
            header.push_str("batch_size,seed,top1");
            for &b in &ab.batch_sizes {
                for &s in &ab.seeds {
                    let mut c = cfg.clone();
                    c.posttrain.batch_size = b;
                    c.posttrain.seed = s;
                    cells.push(Cell { labels: vec![format!("{b}")], seed: s, cfg: c });
                }
            }
        }
        "lower_bound" => {
            header.push_str("lower,seed,top1");
            for &l in &ab.lowers {
                for &s in &ab.seeds {
                    let mut c = cfg.clone();
                    c.curriculum.lower = l;
                    c.posttrain.seed = s;
                    cells.push(Cell { labels: vec![format!("{l}")], seed: s, cfg: c });
                }
            }
        }
        other => {
            return Err(ToolError::validation(format!(
                "ablate.kind must be one of ctl, rcl, scheduler, batch_size, lower_bound; got {other:?}"
            )))
        }
    }

    for (sched, m) in &curves {
        let mut c = cfg.clone();
        c.curriculum.scheduler = sched.clone();
        c.curriculum.milestone = *m;
        let cc = c.curriculum.to_config(c.recovery.iterations, c.recovery.flip)?;
        let mut csv = String::from("step,alpha\n");
        for (step, alpha) in schedule_curve(&cc) {
            writeln!(csv, "{step},{}", crate::report::fmt_value(alpha)).expect("write to string");
        }
        std::fs::write(ctx.dir.join(format!("schedule_{sched}_m{m}.csv")), csv)?;
    }

    let mut grid = header.clone();
    grid.push('\n');
    let mut rows = Vec::new();
    let total = cells.len();
    for (i, cell) in cells.iter().enumerate() {
        println!("[ablate] cell {}/{total}: {} seed {}", i + 1, cell.labels.join("/"), cell.seed);
        let top1 = student_top1(&cell.cfg)?;
        writeln!(
            grid,
            "{},{},{}",
            cell.labels.join(","),
            cell.seed,
            crate::report::fmt_value(top1)
        )
        .expect("write to string");
        rows.push(MetricRow::new(
            &format!("{}-{}", ab.kind, cell.labels.join("-")),
            cell.seed,
            "final_top1",
            0,
            top1,
        ));
    }
    std::fs::write(ctx.dir.join(GRID_NAME), grid)?;

    let summary = serde_json::json!({
        "kind": ab.kind,
        "cells": total,
        "grid": GRID_NAME,
        "curves": curves.len(),
    });
    Ok((rows, summary))
}
