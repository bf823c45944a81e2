//! Command-line surface: one subcommand per pipeline stage plus `gen-data`
//! for materializing the procedural datasets. Exit codes: 0 success,
//! 1 validation/usage errors, 2 runtime failures.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{GeneratedKind, GeneratorParams};
use crate::error::{Result, ToolError};
use crate::pipeline;

#[derive(Parser)]
#[command(
    name = "ddistill",
    about = "Dataset distillation: squeeze a teacher, recover synthetic images, relabel, post-train students",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dotted config override, e.g. --set curriculum.scheduler=step
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override run.threads (compute runs on this many threads).
    #[arg(long)]
    threads: Option<usize>,
    /// Re-run even if the artifact directory is already complete.
    #[arg(long)]
    force: bool,
    /// Override run.precision.
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
}

#[derive(Args)]
struct GenDataArgs {
    /// mnist-like | cifar10-like | cifar100-like
    #[arg(long)]
    kind: String,
    /// Directory to write the train/val files into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    val_per_class: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on the real train split.
    Squeeze(StageArgs),
    /// Synthesize distilled images against the frozen teacher.
    Recover(StageArgs),
    /// Store per-epoch teacher soft labels for the distilled images.
    Relabel(StageArgs),
    /// Train a student from scratch on the distilled data.
    Posttrain(StageArgs),
    /// Score a stored checkpoint on the real data.
    Eval(StageArgs),
    /// Class-incremental comparison of distilled vs random-real memory.
    Continual(StageArgs),
    /// Run a configuration grid end to end.
    Ablate(StageArgs),
    /// Aggregate all artifact summaries into CSVs.
    Report(StageArgs),
    /// Generate a procedural dataset in the standard on-disk layout.
    GenData(GenDataArgs),
}

fn load(args: &StageArgs) -> Result<RunConfig> {
    let cfg = RunConfig::load(
        &args.config,
        &args.sets,
        args.seed,
        args.threads,
        args.precision.as_deref(),
    )?;
    if cfg.run.threads != 1 {
        println!("note: compute is single-threaded; --threads {} changes nothing", cfg.run.threads);
    }
    Ok(cfg)
}

pub fn main_with(args: impl IntoIterator<Item = String>) -> Result<()> {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        // --help and --version arrive as "errors" that print to stdout.
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(ToolError::validation(e.to_string())),
    };
    match cli.command {
        Command::Squeeze(a) => pipeline::squeeze::run(&load(&a)?, a.force).map(|_| ()),
        Command::Recover(a) => pipeline::recover::run(&load(&a)?, a.force).map(|_| ()),
        Command::Relabel(a) => pipeline::relabel::run(&load(&a)?, a.force).map(|_| ()),
        Command::Posttrain(a) => pipeline::posttrain::run(&load(&a)?, a.force).map(|_| ()),
        Command::Eval(a) => pipeline::evaluate::run(&load(&a)?, a.force).map(|_| ()),
        Command::Continual(a) => pipeline::continual::run(&load(&a)?, a.force).map(|_| ()),
        Command::Ablate(a) => pipeline::ablate::run(&load(&a)?, a.force).map(|_| ()),
        Command::Report(a) => pipeline::reporting::run(&load(&a)?, a.force).map(|_| ()),
        Command::GenData(a) => gen_data(&a),
    }
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let kind = GeneratedKind::parse(&args.kind)?;
    let mut params = GeneratorParams::new(kind, args.seed);
    if let Some(t) = args.train_per_class {
        params.train_per_class = t;
    }
    if let Some(v) = args.val_per_class {
        params.val_per_class = v;
    }
    let (train_n, val_n) = crate::data::generate(&args.out, &params)?;
    println!(
        "wrote {train_n} train / {val_n} val images to {}",
        args.out.display()
    );
    Ok(())
}
