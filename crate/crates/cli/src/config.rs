//! Flag/file/default resolution. Precedence: defaults < config file < flags.
//! The fully resolved configuration is echoed into every run manifest.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use crft_core::{ChainMode, Criteria, CrftConfig, Error, ModelConfig, Result, Strategy, TrainConfig};
use crft_core::{tasks, PretrainConfig};

// ── flag groups ──────────────────────────────────────────────────────

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run directory for all outputs (CRFT_RUN_DIR prefixes relative paths).
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for identification, training, and data generation.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct TaskArgs {
    /// Load a dataset file instead of generating one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Operations per chain-arithmetic expression.
    #[arg(long)]
    pub task_steps: Option<usize>,
    #[arg(long)]
    pub modulus: Option<u32>,
    /// Solved demonstrations prepended to each prompt.
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct CrftArgs {
    /// saf | ssf | maf | msf | union-attn | union-sal | fixed | random
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "k-int")]
    pub k_int: Option<usize>,
    /// order | score | random
    #[arg(long)]
    pub criteria: Option<String>,
    /// inherit | fresh
    #[arg(long)]
    pub chain: Option<String>,
    /// Inclusive intervened-layer interval "A:B".
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Train the projection R as well as W and b.
    #[arg(long = "train-r", num_args = 0..=1, default_missing_value = "true")]
    pub train_r: Option<bool>,
    /// Distinct update vectors for demonstration vs question segments.
    #[arg(long = "segments", num_args = 0..=1, default_missing_value = "true")]
    pub segments: Option<bool>,
    #[arg(long)]
    pub fixed_prefix: Option<usize>,
    #[arg(long)]
    pub fixed_suffix: Option<usize>,
    /// Read self- and multi-referential grids from the same layer index.
    #[arg(long = "align-grids", num_args = 0..=1, default_missing_value = "true")]
    pub align_grids: Option<bool>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub accum: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    #[arg(long)]
    pub model_dropout: Option<f64>,
}

// ── config file ──────────────────────────────────────────────────────

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub task: TaskSection,
    pub crft: CrftSection,
    pub train: TrainSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub count: Option<usize>,
    pub task_steps: Option<usize>,
    pub modulus: Option<u32>,
    pub shots: Option<usize>,
    pub data_seed: Option<u64>,
    pub train_frac: Option<f64>,
    pub val_frac: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrftSection {
    pub strategy: Option<String>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub k_int: Option<usize>,
    pub criteria: Option<String>,
    pub chain: Option<String>,
    pub layers: Option<String>,
    pub rank: Option<usize>,
    pub train_r: Option<bool>,
    pub segments: Option<bool>,
    pub fixed_prefix: Option<usize>,
    pub fixed_suffix: Option<usize>,
    pub align_grids: Option<bool>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub accum: Option<usize>,
    pub lr: Option<f64>,
    pub warmup: Option<f64>,
    pub weight_decay: Option<f64>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_seq: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub warmup: Option<f64>,
    pub weight_decay: Option<f64>,
    pub band_lo: Option<f64>,
    pub band_hi: Option<f64>,
    pub check_every: Option<usize>,
    pub max_grad_norm: Option<f64>,
}

pub fn load_file_config(path: Option<&PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("config file: {e}")))
        }
    }
}

// ── resolved settings ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedTask {
    pub data: Option<String>,
    pub count: usize,
    pub task_steps: usize,
    pub modulus: u32,
    pub shots: usize,
    pub data_seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl ResolvedTask {
    pub fn resolve(flags: &TaskArgs, file: &TaskSection, master_seed: u64) -> Self {
        Self {
            data: flags.data.as_ref().map(|p| p.display().to_string()),
            count: flags.count.or(file.count).unwrap_or(3000),
            task_steps: flags.task_steps.or(file.task_steps).unwrap_or(5),
            modulus: flags.modulus.or(file.modulus).unwrap_or(10),
            shots: flags.shots.or(file.shots).unwrap_or(0),
            data_seed: flags.data_seed.or(file.data_seed).unwrap_or(master_seed),
            train_frac: flags.train_frac.or(file.train_frac).unwrap_or(0.7),
            val_frac: flags.val_frac.or(file.val_frac).unwrap_or(0.1),
        }
    }

    pub fn materialize(&self) -> Result<Vec<tasks::TaskSample>> {
        match &self.data {
            Some(p) => tasks::load_dataset(std::path::Path::new(p)),
            None => tasks::gen_few_shot(
                self.count,
                self.shots,
                self.task_steps,
                self.modulus,
                self.data_seed,
            ),
        }
    }
}

fn parse_layer_range(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| Error::InvalidConfig(format!("layer range {s:?} is not A:B")))?;
    let lo = a
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad layer bound {a:?}")))?;
    let hi = b
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad layer bound {b:?}")))?;
    Ok((lo, hi))
}

pub fn resolve_crft(flags: &CrftArgs, file: &CrftSection, master_seed: u64) -> Result<CrftConfig> {
    let mut cfg = CrftConfig {
        seed: master_seed,
        ..CrftConfig::default()
    };
    let strategy = flags.strategy.clone().or_else(|| file.strategy.clone());
    if let Some(s) = strategy {
        cfg.strategy = s.parse::<Strategy>()?;
    }
    if let Some(v) = flags.alpha.or(file.alpha) {
        cfg.alpha = v;
    }
    if let Some(v) = flags.beta.or(file.beta) {
        cfg.beta = v;
    }
    if let Some(v) = flags.k_int.or(file.k_int) {
        cfg.k_int = v;
    }
    if let Some(s) = flags.criteria.clone().or_else(|| file.criteria.clone()) {
        cfg.criteria = s.parse::<Criteria>()?;
    }
    if let Some(s) = flags.chain.clone().or_else(|| file.chain.clone()) {
        cfg.chain_mode = s.parse::<ChainMode>()?;
    }
    if let Some(s) = flags.layers.clone().or_else(|| file.layers.clone()) {
        let (lo, hi) = parse_layer_range(&s)?;
        cfg.layer_lo = Some(lo);
        cfg.layer_hi = Some(hi);
    }
    if let Some(v) = flags.rank.or(file.rank) {
        cfg.rank = v;
    }
    if let Some(v) = flags.train_r.or(file.train_r) {
        cfg.train_r = v;
    }
    if let Some(v) = flags.segments.or(file.segments) {
        cfg.segment_grouping = v;
    }
    if let Some(v) = flags.fixed_prefix.or(file.fixed_prefix) {
        cfg.fixed_prefix = v;
    }
    if let Some(v) = flags.fixed_suffix.or(file.fixed_suffix) {
        cfg.fixed_suffix = v;
    }
    if let Some(v) = flags.align_grids.or(file.align_grids) {
        cfg.align_grid_indices = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_train(flags: &TrainArgs, file: &TrainSection, master_seed: u64) -> Result<TrainConfig> {
    let mut cfg = TrainConfig {
        seed: master_seed,
        ..TrainConfig::default()
    };
    if let Some(v) = flags.epochs.or(file.epochs) {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch.or(file.batch) {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.accum.or(file.accum) {
        cfg.grad_accum_steps = v;
    }
    if let Some(v) = flags.lr.or(file.lr) {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.warmup.or(file.warmup) {
        cfg.warmup_ratio = v;
    }
    if let Some(v) = flags.weight_decay.or(file.weight_decay) {
        cfg.weight_decay = v;
    }
    if let Some(v) = flags.dropout.or(file.dropout) {
        cfg.dropout = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_model(flags: &ModelArgs, file: &ModelSection) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::desk(tasks::vocab::SIZE);
    if let Some(v) = flags.n_layers.or(file.n_layers) {
        cfg.n_layers = v;
    }
    if let Some(v) = flags.n_heads.or(file.n_heads) {
        cfg.n_heads = v;
    }
    if let Some(v) = flags.d_model.or(file.d_model) {
        cfg.d_model = v;
    }
    if let Some(v) = flags.d_ff.or(file.d_ff) {
        cfg.d_ff = v;
    }
    if let Some(v) = flags.max_seq.or(file.max_seq) {
        cfg.max_seq = v;
    }
    if let Some(v) = flags.model_dropout.or(file.dropout) {
        cfg.dropout = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_pretrain(file: &PretrainSection, master_seed: u64) -> PretrainConfig {
    let d = PretrainConfig::default();
    PretrainConfig {
        epochs: file.epochs.unwrap_or(d.epochs),
        batch_size: file.batch.unwrap_or(d.batch_size),
        learning_rate: file.lr.unwrap_or(d.learning_rate),
        warmup_ratio: file.warmup.unwrap_or(d.warmup_ratio),
        weight_decay: file.weight_decay.unwrap_or(d.weight_decay),
        seed: master_seed,
        target_band: Some((
            file.band_lo.unwrap_or(0.40),
            file.band_hi.unwrap_or(0.60),
        )),
        check_every: file.check_every.unwrap_or(d.check_every),
        max_grad_norm: file.max_grad_norm.or(d.max_grad_norm),
    }
}

/// Comma-separated float list ("0,0.05,0.1").
pub fn parse_levels(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad noise level {c:?}")))
        })
        .collect()
}
