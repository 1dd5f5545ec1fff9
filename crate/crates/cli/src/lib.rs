//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure. The `CRFT_RUN_DIR` environment variable prefixes relative output
//! directories.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod heatmap;
pub mod manifest;

use commands::*;
use config::*;
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "crft",
    version,
    about = "Critical-representation fine-tuning lab: identify, intervene, train, validate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Pretrain a base model on chain arithmetic into a target accuracy band.
    Pretrain(PretrainCmd),
    /// Export identified critical positions per example.
    Identify(IdentifyCmd),
    /// Train low-rank interventions with the base frozen.
    Train(TrainCmd),
    /// Greedy-decode accuracy, optionally with a trained intervention.
    Eval(EvalCmd),
    /// Noise retention curves for top- vs bottom-scored positions.
    Perturb(PerturbCmd),
    /// Run one ablation axis (threshold, k-int, criteria, layer-range, random-seeds).
    Ablate(AblateCmd),
    /// Export one attention or saliency grid as CSV or PGM.
    Heatmap(HeatmapCmd),
}

#[derive(Debug, Args)]
struct PretrainCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct IdentifyCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    crft: CrftArgs,
    /// Only process the first N examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    crft: CrftArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct EvalCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trained intervention checkpoint; omit for the frozen baseline.
    #[arg(long)]
    intervention: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
}

#[derive(Debug, Args)]
struct PerturbCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    crft: CrftArgs,
    /// Comma-separated noise standard deviations, ascending.
    #[arg(long, default_value = "0,0.05,0.1,0.2,0.4")]
    noise_levels: String,
    #[arg(long, default_value_t = 4)]
    trials: usize,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 5)]
    bottom_k: usize,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct AblateCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// threshold | k-int | criteria | layer-range | random-seeds
    #[arg(long)]
    axis: String,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    crft: CrftArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct HeatmapCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 0)]
    example: usize,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// attention | saliency
    #[arg(long, default_value = "attention")]
    kind: String,
    /// csv | pgm
    #[arg(long, default_value = "csv")]
    format: String,
}

fn out_dir(common: &CommonArgs) -> PathBuf {
    let out = &common.out;
    if out.is_relative() {
        if let Ok(root) = std::env::var("CRFT_RUN_DIR") {
            if !root.is_empty() {
                return PathBuf::from(root).join(out);
            }
        }
    }
    out.clone()
}

fn master_seed(common: &CommonArgs) -> u64 {
    common.seed.unwrap_or(42)
}

fn dispatch(cli: Cli, argv: Vec<String>) -> crft_core::Result<()> {
    match cli.cmd {
        Cmd::Pretrain(c) => {
            let file = load_file_config(c.common.config.as_ref())?;
            let seed = master_seed(&c.common);
            let task = ResolvedTask::resolve(&c.task, &file.task, seed);
            let model_cfg = resolve_model(&c.model, &file.model)?;
            let pretrain_cfg = resolve_pretrain(&file.pretrain, seed);
            let ctx = RunContext {
                out_dir: out_dir(&c.common),
                argv: argv.clone(),
                started: Instant::now(),
            };
            std::fs::create_dir_all(&ctx.out_dir)?;
            let manifest = RunManifest::new(
                "pretrain",
                argv,
                serde_json::json!({
                    "task": task, "model": model_cfg, "pretrain": pretrain_cfg, "seed": seed,
                }),
                seed,
            );
            cmd_pretrain(&ctx, PretrainInputs { task, model_cfg, pretrain_cfg, seed }, manifest)
        }
        Cmd::Identify(c) => {
            let file = load_file_config(c.common.config.as_ref())?;
            let seed = master_seed(&c.common);
            let task = ResolvedTask::resolve(&c.task, &file.task, seed);
            let crft = resolve_crft(&c.crft, &file.crft, seed)?;
            let ctx = RunContext {
                out_dir: out_dir(&c.common),
                argv: argv.clone(),
                started: Instant::now(),
            };
            std::fs::create_dir_all(&ctx.out_dir)?;
            let manifest = RunManifest::new(
                "identify",
                argv,
                serde_json::json!({"task": task, "crft": crft, "seed": seed}),
                seed,
            );
            cmd_identify(
                &ctx,
                IdentifyInputs { checkpoint: c.checkpoint, task, crft, limit: c.limit },
                manifest,
            )
        }
        Cmd::Train(c) => {
            let file = load_file_config(c.common.config.as_ref())?;
            let seed = master_seed(&c.common);
            let task = ResolvedTask::resolve(&c.task, &file.task, seed);
            let crft = resolve_crft(&c.crft, &file.crft, seed)?;
            let train_cfg = resolve_train(&c.train, &file.train, seed)?;
            let ctx = RunContext {
                out_dir: out_dir(&c.common),
                argv: argv.clone(),
                started: Instant::now(),
            };
            std::fs::create_dir_all(&ctx.out_dir)?;
            let manifest = RunManifest::new(
                "train",
                argv,
                serde_json::json!({"task": task, "crft": crft, "train": train_cfg, "seed": seed}),
                seed,
            );
            cmd_train(
                &ctx,
                TrainInputs { checkpoint: c.checkpoint, task, crft, train_cfg, seed },
                manifest,
            )
        }
        Cmd::Eval(c) => {
            let file = load_file_config(c.common.config.as_ref())?;
            let seed = master_seed(&c.common);
            let task = ResolvedTask::resolve(&c.task, &file.task, seed);
            let ctx = RunContext {
                out_dir: out_dir(&c.common),
                argv: argv.clone(),
                started: Instant::now(),
            };
            std::fs::create_dir_all(&ctx.out_dir)?;
            let manifest = RunManifest::new(
                "eval",
                argv,
                serde_json::json!({"task": task, "seed": seed}),
                seed,
            );
            cmd_eval(
                &ctx,
                EvalInputs { checkpoint: c.checkpoint, intervention: c.intervention, task },
                manifest,
            )
        }
        Cmd::Perturb(c) => {
            let file = load_file_config(c.common.config.as_ref())?;
            let seed = master_seed(&c.common);
            let task = ResolvedTask::resolve(&c.task, &file.task, seed);
            let crft = resolve_crft(&c.crft, &file.crft, seed)?;
            let levels = parse_levels(&c.noise_levels)?;
            let ctx = RunContext {
                out_dir: out_dir(&c.common),
                argv: argv.clone(),
                started: Instant::now(),
            };
            std::fs::create_dir_all(&ctx.out_dir)?;
            let manifest = RunManifest::new(
                "perturb",
                argv,
                serde_json::json!({
                    "task": task, "crft": crft, "noise_levels": levels,
                    "trials": c.trials, "top_k": c.top_k, "bottom_k": c.bottom_k, "seed": seed,
                }),
                seed,
            );
            cmd_perturb(
                &ctx,
                PerturbInputs {
                    checkpoint: c.checkpoint,
                    task,
                    crft,
                    noise_levels: levels,
                    trials: c.trials,
                    top_k: c.top_k,
                    bottom_k: c.bottom_k,
                    limit: c.limit,
                    seed,
                },
                manifest,
            )
        }
        Cmd::Ablate(c) => {
            let file = load_file_config(c.common.config.as_ref())?;
            let seed = master_seed(&c.common);
            let task = ResolvedTask::resolve(&c.task, &file.task, seed);
            let crft = resolve_crft(&c.crft, &file.crft, seed)?;
            let train_cfg = resolve_train(&c.train, &file.train, seed)?;
            let axis: AblationAxis = c.axis.parse()?;
            let ctx = RunContext {
                out_dir: out_dir(&c.common),
                argv: argv.clone(),
                started: Instant::now(),
            };
            std::fs::create_dir_all(&ctx.out_dir)?;
            let manifest = RunManifest::new(
                "ablate",
                argv,
                serde_json::json!({
                    "task": task, "crft": crft, "train": train_cfg,
                    "axis": c.axis, "seed": seed,
                }),
                seed,
            );
            cmd_ablate(
                &ctx,
                AblateInputs { checkpoint: c.checkpoint, task, crft, train_cfg, axis },
                manifest,
            )
        }
        Cmd::Heatmap(c) => {
            let file = load_file_config(c.common.config.as_ref())?;
            let seed = master_seed(&c.common);
            let task = ResolvedTask::resolve(&c.task, &file.task, seed);
            let format: heatmap::HeatmapFormat = c.format.parse()?;
            let ctx = RunContext {
                out_dir: out_dir(&c.common),
                argv: argv.clone(),
                started: Instant::now(),
            };
            std::fs::create_dir_all(&ctx.out_dir)?;
            let manifest = RunManifest::new(
                "heatmap",
                argv,
                serde_json::json!({
                    "task": task, "example": c.example, "layer": c.layer,
                    "kind": c.kind, "format": c.format, "seed": seed,
                }),
                seed,
            );
            cmd_heatmap(
                &ctx,
                HeatmapInputs {
                    checkpoint: c.checkpoint,
                    task,
                    example: c.example,
                    layer: c.layer,
                    kind: c.kind,
                    format,
                },
                manifest,
            )
        }
    }
}

use crft_core::tasks::AblationAxis;

/// Parse and run; returns the process exit code.
pub fn run_command(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
