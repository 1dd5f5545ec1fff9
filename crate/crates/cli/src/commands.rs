//! Subcommand pipelines. Every run writes its outputs plus a manifest that
//! replays to bit-identical metrics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crft_core::checkpoint;
use crft_core::tasks::{self, AblationAxis};
use crft_core::{
    ablation_suite, evaluate, identify, noise_experiment, pretrain_base, saliency_grid,
    train_crft, attention_grid, infoflow, CrftConfig, Error, MicroTransformer, ModelConfig,
    PretrainConfig, Result, Strategy, TaskSample, Tape, TrainConfig,
};

use crate::config::ResolvedTask;
use crate::heatmap::{export_heatmap, HeatmapFormat};
use crate::manifest::RunManifest;

pub struct RunContext {
    pub out_dir: PathBuf,
    pub argv: Vec<String>,
    pub started: Instant,
}

impl RunContext {
    pub fn finish(&self, mut manifest: RunManifest, outputs: &[PathBuf]) -> Result<()> {
        for p in outputs {
            manifest.add_output(p)?;
        }
        manifest.duration_secs = self.started.elapsed().as_secs_f64();
        manifest.write(&self.out_dir)?;
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}

fn split_task(
    task: &ResolvedTask,
) -> Result<(Vec<TaskSample>, Vec<TaskSample>, Vec<TaskSample>, Vec<TaskSample>)> {
    let all = task.materialize()?;
    let (train, val, test) = tasks::split3(all.clone(), task.train_frac, task.val_frac);
    Ok((all, train, val, test))
}

// ── pretrain ─────────────────────────────────────────────────────────

pub struct PretrainInputs {
    pub task: ResolvedTask,
    pub model_cfg: ModelConfig,
    pub pretrain_cfg: PretrainConfig,
    pub seed: u64,
}

pub fn cmd_pretrain(ctx: &RunContext, inputs: PretrainInputs, manifest: RunManifest) -> Result<()> {
    let (all, train, val, _test) = split_task(&inputs.task)?;
    if val.is_empty() {
        return Err(Error::InvalidConfig("pretrain needs a validation split".into()));
    }
    let mut model = MicroTransformer::new(inputs.model_cfg, inputs.seed)?;
    let outcome = pretrain_base(&mut model, &train, &val, &inputs.pretrain_cfg)?;

    let ckpt = ctx.path("base.ckpt");
    checkpoint::save_model(&model, &ckpt)?;
    let data_path = ctx.path("dataset.jsonl");
    tasks::save_dataset(&all, &data_path)?;
    let hist_path = ctx.path("history.jsonl");
    outcome.history.write_jsonl(&hist_path)?;
    let metrics = ctx.path("metrics.json");
    write_json(
        &metrics,
        &json!({
            "val_accuracy": outcome.val_accuracy,
            "steps": outcome.steps,
            "stopped_in_band": outcome.stopped_in_band,
            "n_train": train.len(),
            "n_val": val.len(),
        }),
    )?;
    println!(
        "pretrain: val accuracy {:.4} after {} steps (in band: {})",
        outcome.val_accuracy, outcome.steps, outcome.stopped_in_band
    );
    ctx.finish(manifest, &[ckpt, data_path, hist_path, metrics])
}

// ── identify ─────────────────────────────────────────────────────────

pub struct IdentifyInputs {
    pub checkpoint: PathBuf,
    pub task: ResolvedTask,
    pub crft: CrftConfig,
    pub limit: Option<usize>,
}

pub fn cmd_identify(ctx: &RunContext, inputs: IdentifyInputs, mut manifest: RunManifest) -> Result<()> {
    manifest.add_input(&inputs.checkpoint)?;
    let model = checkpoint::load_model(&inputs.checkpoint)?;
    let samples = inputs.task.materialize()?;
    let n = inputs.limit.unwrap_or(samples.len()).min(samples.len());

    let mut lines = String::new();
    for (i, s) in samples[..n].iter().enumerate() {
        let set = identify(
            &model,
            &s.prompt,
            &s.segments.prefix(s.prompt.len()),
            &inputs.crft,
            None,
        )?;
        lines.push_str(&serde_json::to_string(&json!({
            "example": i,
            "layers": set.layers,
            "positions": set.positions,
            "groups": set.groups,
        }))?);
        lines.push('\n');
    }
    let pos_path = ctx.path("positions.jsonl");
    std::fs::write(&pos_path, lines)?;
    println!("identified critical positions for {n} examples");
    ctx.finish(manifest, &[pos_path])
}

// ── train ────────────────────────────────────────────────────────────

pub struct TrainInputs {
    pub checkpoint: PathBuf,
    pub task: ResolvedTask,
    pub crft: CrftConfig,
    pub train_cfg: TrainConfig,
    pub seed: u64,
}

pub fn cmd_train(ctx: &RunContext, inputs: TrainInputs, mut manifest: RunManifest) -> Result<()> {
    manifest.add_input(&inputs.checkpoint)?;
    let model = checkpoint::load_model(&inputs.checkpoint)?;
    let (all, train, val, test) = split_task(&inputs.task)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidConfig("train and test splits must be non-empty".into()));
    }
    let digest_before = model.freeze_digest();
    let (params, history) = train_crft(
        &model,
        &train,
        &inputs.crft,
        &inputs.train_cfg,
        if val.is_empty() { None } else { Some(&val) },
    )?;
    let baseline = evaluate(&model, &test, None)?;
    let tuned = evaluate(&model, &test, Some((&params, &inputs.crft)))?;

    let int_path = ctx.path("intervention.ckpt");
    checkpoint::save_intervention(&params, &inputs.crft, inputs.seed, &int_path)?;
    let data_path = ctx.path("dataset.jsonl");
    tasks::save_dataset(&all, &data_path)?;
    let hist_path = ctx.path("history.jsonl");
    history.write_jsonl(&hist_path)?;
    let metrics = ctx.path("metrics.json");
    write_json(
        &metrics,
        &json!({
            "baseline_accuracy": baseline.accuracy,
            "crft_accuracy": tuned.accuracy,
            "gain_points": (tuned.accuracy - baseline.accuracy) * 100.0,
            "n_train": train.len(),
            "n_test": test.len(),
            "base_digest": digest_before,
            "base_digest_after": model.freeze_digest(),
            "epoch_val_accuracy": history.epochs.iter().map(|e| e.val_accuracy).collect::<Vec<_>>(),
        }),
    )?;
    println!(
        "train: baseline {:.4} -> crft {:.4} ({:+.1} points) on {} held-out examples",
        baseline.accuracy,
        tuned.accuracy,
        (tuned.accuracy - baseline.accuracy) * 100.0,
        test.len()
    );
    ctx.finish(manifest, &[int_path, data_path, hist_path, metrics])
}

// ── eval ─────────────────────────────────────────────────────────────

pub struct EvalInputs {
    pub checkpoint: PathBuf,
    pub intervention: Option<PathBuf>,
    pub task: ResolvedTask,
}

pub fn cmd_eval(ctx: &RunContext, inputs: EvalInputs, mut manifest: RunManifest) -> Result<()> {
    manifest.add_input(&inputs.checkpoint)?;
    let model = checkpoint::load_model(&inputs.checkpoint)?;
    let samples = inputs.task.materialize()?;
    let loaded = match &inputs.intervention {
        Some(p) => {
            manifest.add_input(p)?;
            Some(checkpoint::load_intervention(p)?)
        }
        None => None,
    };
    let report = match &loaded {
        Some((params, cfg)) => evaluate(&model, &samples, Some((params, cfg)))?,
        None => evaluate(&model, &samples, None)?,
    };

    let metrics = ctx.path("metrics.json");
    write_json(
        &metrics,
        &json!({
            "accuracy": report.accuracy,
            "n": report.n,
            "intervention": inputs.intervention.is_some(),
        }),
    )?;
    let records = ctx.path("records.jsonl");
    let mut lines = String::new();
    for r in &report.records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    std::fs::write(&records, lines)?;
    println!("eval: accuracy {:.4} over {} examples", report.accuracy, report.n);
    ctx.finish(manifest, &[metrics, records])
}

// ── perturb ──────────────────────────────────────────────────────────

pub struct PerturbInputs {
    pub checkpoint: PathBuf,
    pub task: ResolvedTask,
    pub crft: CrftConfig,
    pub noise_levels: Vec<f64>,
    pub trials: usize,
    pub top_k: usize,
    pub bottom_k: usize,
    pub limit: Option<usize>,
    pub seed: u64,
}

pub fn cmd_perturb(ctx: &RunContext, inputs: PerturbInputs, mut manifest: RunManifest) -> Result<()> {
    manifest.add_input(&inputs.checkpoint)?;
    let model = checkpoint::load_model(&inputs.checkpoint)?;
    let samples = inputs.task.materialize()?;
    let n = inputs.limit.unwrap_or(samples.len()).min(samples.len());
    let curve = noise_experiment(
        &model,
        &samples[..n],
        &inputs.crft,
        inputs.top_k,
        inputs.bottom_k,
        &inputs.noise_levels,
        inputs.trials,
        inputs.seed,
    )?;

    let json_path = ctx.path("retention.json");
    write_json(&json_path, &serde_json::to_value(&curve)?)?;
    let csv_path = ctx.path("retention.csv");
    let mut csv = String::from("sigma,top,bottom\n");
    for i in 0..curve.levels.len() {
        csv.push_str(&format!("{},{},{}\n", curve.levels[i], curve.top[i], curve.bottom[i]));
    }
    std::fs::write(&csv_path, csv)?;
    for i in 0..curve.levels.len() {
        println!(
            "sigma {:>8}: top {:.4}  bottom {:.4}",
            curve.levels[i], curve.top[i], curve.bottom[i]
        );
    }
    ctx.finish(manifest, &[json_path, csv_path])
}

// ── ablate ───────────────────────────────────────────────────────────

pub struct AblateInputs {
    pub checkpoint: PathBuf,
    pub task: ResolvedTask,
    pub crft: CrftConfig,
    pub train_cfg: TrainConfig,
    pub axis: AblationAxis,
}

pub fn cmd_ablate(ctx: &RunContext, inputs: AblateInputs, mut manifest: RunManifest) -> Result<()> {
    manifest.add_input(&inputs.checkpoint)?;
    let model = checkpoint::load_model(&inputs.checkpoint)?;
    let (_, train, _, test) = split_task(&inputs.task)?;
    let rows = ablation_suite(&model, &train, &test, &inputs.crft, &inputs.train_cfg, inputs.axis)?;

    let csv_path = ctx.path("ablation.csv");
    let mut csv = String::from("axis,value,accuracy\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.axis, r.value, r.accuracy));
    }
    std::fs::write(&csv_path, csv)?;
    let json_path = ctx.path("ablation.json");
    write_json(&json_path, &serde_json::to_value(&rows)?)?;
    for r in &rows {
        println!("{} = {:<12} accuracy {:.4}", r.axis, r.value, r.accuracy);
    }
    ctx.finish(manifest, &[csv_path, json_path])
}

// ── heatmap ──────────────────────────────────────────────────────────

pub struct HeatmapInputs {
    pub checkpoint: PathBuf,
    pub task: ResolvedTask,
    pub example: usize,
    pub layer: usize,
    pub kind: String,
    pub format: HeatmapFormat,
}

pub fn cmd_heatmap(ctx: &RunContext, inputs: HeatmapInputs, mut manifest: RunManifest) -> Result<()> {
    manifest.add_input(&inputs.checkpoint)?;
    let model = checkpoint::load_model(&inputs.checkpoint)?;
    let samples = inputs.task.materialize()?;
    let sample = samples
        .get(inputs.example)
        .ok_or_else(|| Error::IndexOutOfRange(format!("example {} of {}", inputs.example, samples.len())))?;

    let grid = match inputs.kind.as_str() {
        "attention" => {
            let mut tape = Tape::new();
            let trace = model.forward(
                &mut tape,
                &sample.prompt,
                None,
                crft_core::ForwardOpts::eval(),
            )?;
            attention_grid(&trace, inputs.layer)?
        }
        "saliency" => {
            let pass = infoflow::identification_pass(&model, &sample.prompt, true, None)?;
            saliency_grid(&pass.trace, inputs.layer, pass.grads.as_ref().expect("saliency pass"))?
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "grid kind {other:?} is not attention|saliency"
            )))
        }
    };
    let ext = match inputs.format {
        HeatmapFormat::Csv => "csv",
        HeatmapFormat::Pgm => "pgm",
    };
    let path = ctx.path(&format!(
        "heatmap_example{}_layer{}_{}.{ext}",
        inputs.example, inputs.layer, inputs.kind
    ));
    export_heatmap(&grid, &path, inputs.format)?;
    println!("wrote {}", path.display());
    ctx.finish(manifest, &[path])
}

// Re-export for callers that only get a strategy string.
pub fn strategy_from(cfg: &CrftConfig) -> Strategy {
    cfg.strategy
}
