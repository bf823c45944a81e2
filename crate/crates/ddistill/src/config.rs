//! Run configuration: TOML file + repeatable dotted `--set KEY=VALUE`
//! overrides, resolved into one struct. Every stage is addressed by a
//! content hash over exactly the config sections that influence it, so
//! artifact directories are shared between runs (and grid points) whenever
//! their inputs coincide.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ddistill_core::augment::{CurriculumConfig, SchedulerKind};
use ddistill_core::nn::{Architecture, ModelSpec};

use crate::checkpoint::hex_prefix;
use crate::data::DatasetKind;
use crate::error::{Result, ToolError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
    pub precision: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "run".into(),
            output_dir: PathBuf::from("out"),
            seed: 0,
            threads: 1,
            precision: "f32".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub dir: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { kind: DatasetKind::MnistIdx, dir: PathBuf::from("data/mnist-like") }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    pub width_mult: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { arch: "convnet_bn_3".into(), width_mult: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub crop_lower: f64,
    pub crop_upper: f64,
    pub flip: bool,
    pub cutout: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection { crop_lower: 0.5, crop_upper: 1.0, flip: true, cutout: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqueezeSection {
    pub seed: u64,
    pub optimizer: String,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    pub eval_every: usize,
    pub augment: AugmentSection,
}

impl Default for SqueezeSection {
    fn default() -> Self {
        SqueezeSection {
            seed: 0,
            optimizer: "sgd".into(),
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 20,
            label_smoothing: 0.2,
            eval_every: 5,
            augment: AugmentSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverySection {
    pub seed: u64,
    pub teacher: String,
    pub alpha_bn: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub ipc: usize,
    pub gradient_mode: String,
    pub flip: bool,
}

impl Default for RecoverySection {
    fn default() -> Self {
        RecoverySection {
            seed: 0,
            teacher: String::new(),
            alpha_bn: 0.01,
            lr: 0.25,
            beta1: 0.5,
            beta2: 0.9,
            batch_size: 100,
            iterations: 1000,
            ipc: 10,
            gradient_mode: "end_to_end".into(),
            flip: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    pub scheduler: String,
    pub lower: f64,
    pub upper: f64,
    pub shape: f64,
    pub milestone: f64,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        CurriculumSection {
            scheduler: "cosine".into(),
            lower: 0.08,
            upper: 1.0,
            shape: 0.92,
            milestone: 1.0,
        }
    }
}

impl CurriculumSection {
    pub fn to_config(&self, total_steps: usize, flip: bool) -> Result<CurriculumConfig> {
        let scheduler = SchedulerKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == self.scheduler)
            .ok_or_else(|| {
                ToolError::validation(format!("unknown scheduler {:?}", self.scheduler))
            })?;
        let cfg = CurriculumConfig {
            scheduler,
            lower: self.lower,
            upper: self.upper,
            shape: self.shape,
            milestone: self.milestone,
            total_steps,
            flip,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelSection {
    pub seed: u64,
    pub temperature: f64,
    pub epochs: usize,
    pub crop_lower: f64,
    pub crop_upper: f64,
    pub flip: bool,
}

impl Default for RelabelSection {
    fn default() -> Self {
        RelabelSection {
            seed: 0,
            temperature: 1.0,
            epochs: 0,
            crop_lower: 0.08,
            crop_upper: 1.0,
            flip: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosttrainSection {
    pub seed: u64,
    pub arch: String,
    pub width_mult: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub eval_every: usize,
}

impl Default for PosttrainSection {
    fn default() -> Self {
        PosttrainSection {
            seed: 0,
            arch: String::new(),
            width_mult: 0.0,
            lr: 1e-3,
            weight_decay: 1e-2,
            batch_size: 16,
            epochs: 80,
            temperature: 1.0,
            eval_every: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: String,
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualSection {
    pub seed: u64,
    pub steps: usize,
    pub ipc: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ContinualSection {
    fn default() -> Self {
        ContinualSection { seed: 0, steps: 5, ipc: 10, epochs: 30, batch_size: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub kind: String,
    pub schedulers: Vec<String>,
    pub milestones: Vec<f64>,
    pub alphas: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub lowers: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            kind: "scheduler".into(),
            schedulers: vec!["step".into(), "linear".into(), "cosine".into()],
            milestones: vec![0.2, 0.6, 1.0],
            alphas: vec![0.08, 0.4, 1.0],
            batch_sizes: vec![16, 128],
            lowers: vec![0.08, 0.4],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub squeeze: SqueezeSection,
    pub recovery: RecoverySection,
    pub curriculum: CurriculumSection,
    pub relabel: RelabelSection,
    pub posttrain: PosttrainSection,
    pub eval: EvalSection,
    pub continual: ContinualSection,
    pub ablate: AblateSection,
}

fn parse_arch(name: &str) -> Result<Architecture> {
    Architecture::parse(name)
        .ok_or_else(|| ToolError::validation(format!("unknown architecture {name:?}")))
}

impl RunConfig {
    /// Parse `path`, apply `--set` overrides, then the direct CLI flags.
    pub fn load(
        path: &Path,
        sets: &[String],
        seed: Option<u64>,
        threads: Option<usize>,
        precision: Option<&str>,
    ) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToolError::validation(format!("{}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| ToolError::validation(format!("{}: {e}", path.display())))?;
        let mut value = toml::Value::Table(table);
        for kv in sets {
            apply_override(&mut value, kv)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e| ToolError::validation(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed {
            cfg.run.seed = s;
        }
        if let Some(t) = threads {
            cfg.run.threads = t;
        }
        if let Some(p) = precision {
            cfg.run.precision = p.to_string();
        }
        if let Ok(out) = std::env::var("DDISTILL_OUT") {
            if !out.is_empty() {
                cfg.run.output_dir = PathBuf::from(out);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.precision != "f32" && self.run.precision != "f64" {
            return Err(ToolError::validation(format!(
                "precision must be f32 or f64, got {:?}",
                self.run.precision
            )));
        }
        if self.run.threads == 0 {
            return Err(ToolError::validation("threads must be >= 1"));
        }
        parse_arch(&self.model.arch)?;
        if !self.posttrain.arch.is_empty() {
            parse_arch(&self.posttrain.arch)?;
        }
        if self.model.width_mult <= 0.0 {
            return Err(ToolError::validation("model.width_mult must be > 0"));
        }
        if self.squeeze.epochs == 0 || self.squeeze.batch_size == 0 {
            return Err(ToolError::validation("squeeze epochs/batch_size must be >= 1"));
        }
        if !matches!(self.squeeze.optimizer.as_str(), "sgd" | "adamw") {
            return Err(ToolError::validation(format!(
                "squeeze.optimizer must be sgd or adamw, got {:?}",
                self.squeeze.optimizer
            )));
        }
        if !(0.0..1.0).contains(&self.squeeze.label_smoothing) {
            return Err(ToolError::validation("label_smoothing must lie in [0, 1)"));
        }
        if self.recovery.alpha_bn < 0.0 {
            return Err(ToolError::validation("recovery.alpha_bn must be >= 0"));
        }
        if self.recovery.iterations == 0 || self.recovery.batch_size == 0 || self.recovery.ipc == 0
        {
            return Err(ToolError::validation(
                "recovery iterations/batch_size/ipc must be >= 1",
            ));
        }
        if !matches!(self.recovery.gradient_mode.as_str(), "end_to_end" | "paste_back") {
            return Err(ToolError::validation(format!(
                "recovery.gradient_mode must be end_to_end or paste_back, got {:?}",
                self.recovery.gradient_mode
            )));
        }
        self.curriculum.to_config(self.recovery.iterations, self.recovery.flip)?;
        if self.relabel.temperature <= 0.0 || self.posttrain.temperature <= 0.0 {
            return Err(ToolError::validation("temperatures must be > 0"));
        }
        if self.posttrain.epochs == 0 || self.posttrain.batch_size == 0 {
            return Err(ToolError::validation("posttrain epochs/batch_size must be >= 1"));
        }
        if self.continual.steps == 0 || self.continual.ipc == 0 || self.continual.epochs == 0 {
            return Err(ToolError::validation("continual steps/ipc/epochs must be >= 1"));
        }
        Ok(())
    }

    pub fn teacher_spec(&self, bundle_channels: usize, h: usize, w: usize, classes: usize) -> Result<ModelSpec> {
        let arch = parse_arch(&self.model.arch)?;
        let mut spec = ModelSpec::new(arch, bundle_channels, h, w, classes);
        spec.width_mult = self.model.width_mult;
        spec.validate().map_err(|e| ToolError::validation(e.to_string()))?;
        Ok(spec)
    }

    /// Student spec for post-training; empty fields inherit the teacher's.
    pub fn student_spec(&self, teacher: &ModelSpec) -> Result<ModelSpec> {
        let arch = if self.posttrain.arch.is_empty() {
            teacher.arch
        } else {
            parse_arch(&self.posttrain.arch)?
        };
        let mut spec = ModelSpec::new(
            arch,
            teacher.in_channels,
            teacher.image_h,
            teacher.image_w,
            teacher.classes,
        );
        spec.width_mult = if self.posttrain.width_mult > 0.0 {
            self.posttrain.width_mult
        } else {
            teacher.width_mult
        };
        spec.validate().map_err(|e| ToolError::validation(e.to_string()))?;
        Ok(spec)
    }

    /// Effective seed of a stage: the global seed offset by the section seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let section = match stage {
            Stage::Squeeze => self.squeeze.seed,
            Stage::Recover => self.recovery.seed,
            Stage::Relabel => self.relabel.seed,
            Stage::Posttrain => self.posttrain.seed,
            Stage::Continual => self.continual.seed,
            _ => 0,
        };
        self.run.seed.wrapping_add(section)
    }

    pub fn relabel_epochs(&self) -> usize {
        if self.relabel.epochs > 0 {
            self.relabel.epochs
        } else {
            self.posttrain.epochs
        }
    }
}

/// `KEY=VALUE` with a dotted key; the value is parsed as a TOML literal and
/// falls back to a plain string.
fn apply_override(root: &mut toml::Value, kv: &str) -> Result<()> {
    let (key, raw) = kv.split_once('=').ok_or_else(|| {
        ToolError::validation(format!("--set needs KEY=VALUE, got {kv:?}"))
    })?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(doc) => doc.get("v").cloned().unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ToolError::validation(format!("bad --set key {key:?}")));
    }
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| ToolError::validation(format!("--set {key}: {part} is not a table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| ToolError::validation(format!("--set {key}: parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Squeeze,
    Recover,
    Relabel,
    Posttrain,
    Eval,
    Continual,
    Ablate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Squeeze => "squeeze",
            Stage::Recover => "recover",
            Stage::Relabel => "relabel",
            Stage::Posttrain => "posttrain",
            Stage::Eval => "eval",
            Stage::Continual => "continual",
            Stage::Ablate => "ablate",
            Stage::Report => "report",
        }
    }
}

/// Canonical JSON (sorted keys) of exactly the sections a stage depends
/// on. This text is what gets hashed and what is stored next to artifacts
/// to detect hash collisions / tampering.
pub fn stage_canonical(cfg: &RunConfig, stage: Stage) -> String {
    let mut parts: Vec<(&str, serde_json::Value)> = vec![
        ("precision", serde_json::json!(cfg.run.precision)),
        ("seed", serde_json::json!(cfg.run.seed)),
        ("dataset", serde_json::to_value(&cfg.dataset).expect("serializable")),
    ];
    let mut add = |name: &'static str, v: serde_json::Value| parts.push((name, v));
    let squeeze_deps = |add: &mut dyn FnMut(&'static str, serde_json::Value)| {
        add("model", serde_json::to_value(&cfg.model).expect("serializable"));
        add("squeeze", serde_json::to_value(&cfg.squeeze).expect("serializable"));
    };
    let recover_deps = |add: &mut dyn FnMut(&'static str, serde_json::Value)| {
        add("recovery", serde_json::to_value(&cfg.recovery).expect("serializable"));
        add("curriculum", serde_json::to_value(&cfg.curriculum).expect("serializable"));
    };
    let relabel_deps = |add: &mut dyn FnMut(&'static str, serde_json::Value)| {
        add("relabel", serde_json::to_value(&cfg.relabel).expect("serializable"));
        add("relabel_epochs", serde_json::json!(cfg.relabel_epochs()));
    };
    match stage {
        Stage::Squeeze => squeeze_deps(&mut add),
        Stage::Recover => {
            squeeze_deps(&mut add);
            recover_deps(&mut add);
        }
        Stage::Relabel => {
            squeeze_deps(&mut add);
            recover_deps(&mut add);
            relabel_deps(&mut add);
        }
        Stage::Posttrain => {
            squeeze_deps(&mut add);
            recover_deps(&mut add);
            relabel_deps(&mut add);
            add("posttrain", serde_json::to_value(&cfg.posttrain).expect("serializable"));
        }
        Stage::Eval => {
            add("eval", serde_json::to_value(&cfg.eval).expect("serializable"));
        }
        Stage::Continual => {
            squeeze_deps(&mut add);
            recover_deps(&mut add);
            relabel_deps(&mut add);
            add("posttrain", serde_json::to_value(&cfg.posttrain).expect("serializable"));
            add("continual", serde_json::to_value(&cfg.continual).expect("serializable"));
        }
        Stage::Ablate | Stage::Report => {
            add("all", serde_json::to_value(cfg).expect("serializable"));
        }
    }
    let map: std::collections::BTreeMap<&str, serde_json::Value> = parts.into_iter().collect();
    serde_json::to_string(&map).expect("serializable")
}

pub fn stage_hash(cfg: &RunConfig, stage: Stage) -> String {
    let digest = Sha256::digest(stage_canonical(cfg, stage).as_bytes());
    hex_prefix(&digest, 12)
}

/// `output_dir/<stage>/<hash>/`.
pub fn artifact_dir(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.run.output_dir.join(stage.name()).join(stage_hash(cfg, stage))
}
