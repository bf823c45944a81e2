//! Metric rows and summaries. Every stage appends rows to a `metrics.csv`
//! in its artifact directory (long format: run_id, seed, metric, step,
//! value) and finishes by writing `summary.json`; the summary doubles as
//! the completion marker, so it must be the last file written.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, ToolError};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub metric: String,
    pub step: u64,
    pub value: f64,
}

impl MetricRow {
    pub fn new(run_id: &str, seed: u64, metric: &str, step: u64, value: f64) -> Self {
        MetricRow { run_id: run_id.into(), seed, metric: metric.into(), step, value }
    }
}

pub const METRICS_NAME: &str = "metrics.csv";
pub const SUMMARY_NAME: &str = "summary.json";
const HEADER: &str = "run_id,seed,metric,step,value";

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in rows {
        if r.run_id.contains(',') || r.metric.contains(',') {
            return Err(ToolError::runtime(format!(
                "metric fields may not contain commas: {:?}/{:?}",
                r.run_id, r.metric
            )));
        }
        writeln!(out, "{},{},{},{},{}", r.run_id, r.seed, r.metric, r.step, fmt_value(r.value))
            .expect("write to string");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ToolError::validation(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => {
            return Err(ToolError::validation(format!(
                "{}: expected header {HEADER:?}, got {other:?}",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(ToolError::validation(format!(
                "{} line {}: expected 5 fields, got {}",
                path.display(),
                n + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| {
            ToolError::validation(format!("{} line {}: bad {what}", path.display(), n + 2))
        };
        rows.push(MetricRow {
            run_id: fields[0].to_string(),
            seed: fields[1].parse().map_err(|_| parse_err("seed"))?,
            metric: fields[2].to_string(),
            step: fields[3].parse().map_err(|_| parse_err("step"))?,
            value: fields[4].parse().map_err(|_| parse_err("value"))?,
        });
    }
    Ok(rows)
}

/// Full precision, but without the noise of `{:?}`'s exponent forms for
/// ordinary magnitudes. Round-trips through `str::parse::<f64>`.
pub fn fmt_value(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

pub fn write_summary(dir: &Path, summary: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(dir.join(SUMMARY_NAME), text)?;
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<serde_json::Value> {
    let path = dir.join(SUMMARY_NAME);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ToolError::validation(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)
        .map_err(|e| ToolError::validation(format!("{}: {e}", path.display())))?)
}

pub fn summary_f64(summary: &serde_json::Value, key: &str) -> Result<f64> {
    summary
        .get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| ToolError::runtime(format!("summary is missing numeric field {key:?}")))
}
