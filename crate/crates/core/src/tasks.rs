//! Synthetic chain-arithmetic reasoning tasks, evaluation, and the
//! noise/ablation experiments.
//!
//! A sample is a chained modular expression ("3+5-2=") whose target spells
//! every intermediate result, an answer marker, the final answer, and an
//! end token. Few-shot variants prepend solved examples as demonstration
//! segments. Evaluation greedy-decodes and scores exact match on the span
//! between the answer marker and the end token.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infoflow::{
    identification_pass, identify, layer_scores, CriticalSet, CrftConfig, Segment, SegmentMap,
    Strategy,
};
use crate::intervention::InterventionParams;
use crate::model::{EditMap, LayerEditSpec, MicroTransformer};
use crate::train::{train_crft, TrainConfig};

/// Fixed symbol vocabulary: digits 0-9, operators, markers, and the two
/// answer-dialect mode tokens.
pub mod vocab {
    pub const PLUS: u32 = 10;
    pub const MINUS: u32 = 11;
    pub const EQ: u32 = 12;
    pub const SEP: u32 = 13;
    pub const ANS: u32 = 14;
    pub const EOS: u32 = 15;
    pub const MODE_PLAIN: u32 = 16;
    pub const MODE_SHIFT: u32 = 17;
    pub const SIZE: usize = 18;
}

/// How a sample spells its final answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AnswerMode {
    /// The answer digit itself.
    Plain,
    /// The answer digit rotated by [`DIALECT_SHIFT`]; the prompt carries the
    /// shift-mode token.
    Shifted,
}

/// Rotation applied to the final answer digit in the shifted dialect.
pub const DIALECT_SHIFT: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
    /// Tags for every position of prompt followed by target.
    pub segments: SegmentMap,
    /// Final-answer tokens (the span between ANS and EOS in the target).
    pub answer: Vec<u32>,
    pub answer_value: u32,
}

impl TaskSample {
    pub fn full_tokens(&self) -> Vec<u32> {
        let mut out = self.prompt.clone();
        out.extend_from_slice(&self.target);
        out
    }

    /// (row, label) pairs predicting every target token under teacher forcing.
    pub fn answer_loss_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.prompt.len();
        self.target
            .iter()
            .enumerate()
            .map(|(i, &t)| (n + i - 1, t as usize))
            .collect()
    }

    /// (row, label) pairs over the whole sequence (language-model loss).
    pub fn next_token_pairs(&self) -> Vec<(usize, usize)> {
        let full = self.full_tokens();
        (1..full.len()).map(|i| (i - 1, full[i] as usize)).collect()
    }
}

fn expression_tokens(digits: &[u32], ops: &[u32]) -> Vec<u32> {
    let mut out = vec![digits[0]];
    for (op, d) in ops.iter().zip(&digits[1..]) {
        out.push(*op);
        out.push(*d);
    }
    out.push(vocab::EQ);
    out
}

fn chain_results(digits: &[u32], ops: &[u32], modulus: u32) -> Vec<u32> {
    let mut acc = digits[0];
    let mut out = Vec::with_capacity(ops.len());
    for (op, d) in ops.iter().zip(&digits[1..]) {
        acc = match *op {
            vocab::PLUS => (acc + d) % modulus,
            vocab::MINUS => (acc + modulus - d) % modulus,
            other => unreachable!("not an operator token: {other}"),
        };
        out.push(acc);
    }
    out
}

fn target_tokens(results: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, &r) in results[..results.len() - 1].iter().enumerate() {
        if i > 0 {
            out.push(vocab::SEP);
        }
        out.push(r);
    }
    out.push(vocab::ANS);
    out.push(*results.last().unwrap());
    out.push(vocab::EOS);
    out
}

fn draw_expression(rng: &mut ChaCha8Rng, n_steps: usize, modulus: u32) -> (Vec<u32>, Vec<u32>) {
    let digits: Vec<u32> = (0..=n_steps).map(|_| rng.gen_range(0..modulus)).collect();
    let ops: Vec<u32> = (0..n_steps)
        .map(|_| if rng.gen::<bool>() { vocab::PLUS } else { vocab::MINUS })
        .collect();
    (digits, ops)
}

fn build_sample(digits: &[u32], ops: &[u32], modulus: u32) -> TaskSample {
    build_sample_moded(digits, ops, modulus, None)
}

fn build_sample_moded(
    digits: &[u32],
    ops: &[u32],
    modulus: u32,
    mode: Option<AnswerMode>,
) -> TaskSample {
    let mut prompt = Vec::new();
    match mode {
        Some(AnswerMode::Plain) => prompt.push(vocab::MODE_PLAIN),
        Some(AnswerMode::Shifted) => prompt.push(vocab::MODE_SHIFT),
        None => {}
    }
    prompt.extend(expression_tokens(digits, ops));
    let results = chain_results(digits, ops, modulus);
    let mut target = target_tokens(&results);
    let value = *results.last().unwrap();
    let spelled = match mode {
        Some(AnswerMode::Shifted) => (value + DIALECT_SHIFT) % modulus,
        _ => value,
    };
    // The spelled answer sits right before the closing EOS.
    let ans_idx = target.len() - 2;
    target[ans_idx] = spelled;
    let answer = vec![spelled];
    let mut tags = vec![Segment::Question; prompt.len()];
    tags.extend(vec![Segment::Answer; target.len()]);
    TaskSample {
        prompt,
        target,
        segments: SegmentMap { tags },
        answer,
        answer_value: value,
    }
}

/// Dialect corpus: `shifted_per` samples out of every `cycle` use the shifted
/// answer dialect, the rest the plain one. Every prompt starts with its mode
/// token. Prompts are unique across the whole corpus.
pub fn gen_dialect_mix(
    count: usize,
    shifted_per: usize,
    cycle: usize,
    n_steps: usize,
    modulus: u32,
    seed: u64,
) -> Result<Vec<TaskSample>> {
    if count == 0 {
        return Err(Error::EmptyInput("requested zero samples".into()));
    }
    if n_steps < 2 {
        return Err(Error::InvalidConfig(format!("n_steps {n_steps} must be >= 2")));
    }
    if cycle == 0 || shifted_per > cycle {
        return Err(Error::InvalidConfig("shifted_per must be <= cycle".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let max_attempts = count.saturating_mul(400) + 10_000;
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidConfig(format!(
                "expression space too small for {count} unique samples"
            )));
        }
        let mode = if out.len() % cycle < shifted_per {
            AnswerMode::Shifted
        } else {
            AnswerMode::Plain
        };
        let (digits, ops) = draw_expression(&mut rng, n_steps, modulus);
        let sample = build_sample_moded(&digits, &ops, modulus, Some(mode));
        if !seen.insert(sample.prompt.clone()) {
            continue;
        }
        out.push(sample);
    }
    Ok(out)
}

/// Shifted-dialect samples only (the intervention target task), unique
/// prompts, optionally few-shot with demonstrations in the same dialect.
pub fn gen_dialect_task(
    count: usize,
    shots: usize,
    n_steps: usize,
    modulus: u32,
    seed: u64,
) -> Result<Vec<TaskSample>> {
    if count == 0 {
        return Err(Error::EmptyInput("requested zero samples".into()));
    }
    if n_steps < 2 {
        return Err(Error::InvalidConfig(format!("n_steps {n_steps} must be >= 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let max_attempts = count.saturating_mul(400) + 10_000;
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidConfig(format!(
                "expression space too small for {count} unique samples"
            )));
        }
        let (digits, ops) = draw_expression(&mut rng, n_steps, modulus);
        let question = build_sample_moded(&digits, &ops, modulus, Some(AnswerMode::Shifted));
        let mut prompt = Vec::new();
        let mut tags = Vec::new();
        for _ in 0..shots {
            let (dd, dops) = draw_expression(&mut rng, n_steps, modulus);
            let demo = build_sample_moded(&dd, &dops, modulus, Some(AnswerMode::Shifted));
            prompt.extend_from_slice(&demo.prompt);
            prompt.extend_from_slice(&demo.target);
            tags.extend(vec![Segment::Demonstration; demo.prompt.len() + demo.target.len()]);
        }
        prompt.extend_from_slice(&question.prompt);
        tags.extend(vec![Segment::Question; question.prompt.len()]);
        tags.extend(vec![Segment::Answer; question.target.len()]);
        if !seen.insert(prompt.clone()) {
            continue;
        }
        out.push(TaskSample {
            prompt,
            target: question.target.clone(),
            segments: SegmentMap { tags },
            answer: question.answer.clone(),
            answer_value: question.answer_value,
        });
    }
    Ok(out)
}

/// Zero-shot chain-arithmetic samples with unique prompts. Deterministic for
/// a given seed; splitting the returned list keeps splits disjoint because
/// prompts never repeat.
pub fn gen_chain_arith(count: usize, n_steps: usize, modulus: u32, seed: u64) -> Result<Vec<TaskSample>> {
    gen_few_shot(count, 0, n_steps, modulus, seed)
}

/// Few-shot variant: `shots` solved demonstrations precede the question.
pub fn gen_few_shot(
    count: usize,
    shots: usize,
    n_steps: usize,
    modulus: u32,
    seed: u64,
) -> Result<Vec<TaskSample>> {
    if count == 0 {
        return Err(Error::EmptyInput("requested zero samples".into()));
    }
    if n_steps < 2 {
        return Err(Error::InvalidConfig(format!("n_steps {n_steps} must be >= 2")));
    }
    if modulus < 2 || modulus > 10 {
        return Err(Error::InvalidConfig(format!("modulus {modulus} must be in [2, 10]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let max_attempts = count.saturating_mul(400) + 10_000;
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidConfig(format!(
                "expression space too small for {count} unique samples"
            )));
        }
        let (digits, ops) = draw_expression(&mut rng, n_steps, modulus);
        let question = build_sample(&digits, &ops, modulus);

        let mut prompt = Vec::new();
        let mut tags = Vec::new();
        for _ in 0..shots {
            let (dd, dops) = draw_expression(&mut rng, n_steps, modulus);
            let demo = build_sample(&dd, &dops, modulus);
            prompt.extend_from_slice(&demo.prompt);
            prompt.extend_from_slice(&demo.target);
            tags.extend(vec![Segment::Demonstration; demo.prompt.len() + demo.target.len()]);
        }
        prompt.extend_from_slice(&question.prompt);
        tags.extend(vec![Segment::Question; question.prompt.len()]);
        tags.extend(vec![Segment::Answer; question.target.len()]);

        if !seen.insert(prompt.clone()) {
            continue;
        }
        out.push(TaskSample {
            prompt,
            target: question.target.clone(),
            segments: SegmentMap { tags },
            answer: question.answer.clone(),
            answer_value: question.answer_value,
        });
    }
    Ok(out)
}

/// Contiguous train/val/test split of an already-unique sample list.
pub fn split3(
    samples: Vec<TaskSample>,
    train_frac: f64,
    val_frac: f64,
) -> (Vec<TaskSample>, Vec<TaskSample>, Vec<TaskSample>) {
    let n = samples.len();
    let n_train = ((n as f64) * train_frac).floor() as usize;
    let n_val = ((n as f64) * val_frac).floor() as usize;
    let mut samples = samples;
    let test = samples.split_off((n_train + n_val).min(n));
    let val = samples.split_off(n_train.min(samples.len()));
    (samples, val, test)
}

// ── dataset files ────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    version: u32,
}

pub const DATASET_SCHEMA: &str = "crft-chain-arith";
pub const DATASET_VERSION: u32 = 1;

pub fn save_dataset(samples: &[TaskSample], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&DatasetHeader {
        schema: DATASET_SCHEMA.into(),
        version: DATASET_VERSION,
    })?);
    out.push('\n');
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<TaskSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: DatasetHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| Error::EmptyInput("dataset file is empty".into()))?,
    )?;
    if header.schema != DATASET_SCHEMA || header.version != DATASET_VERSION {
        return Err(Error::InvalidConfig(format!(
            "unsupported dataset schema {}@{}",
            header.schema, header.version
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

// ── evaluation ───────────────────────────────────────────────────────

/// Final-answer span of a generated continuation: tokens strictly between
/// the answer marker and the end token (or the end of the output).
pub fn extract_answer(generated: &[u32]) -> Option<Vec<u32>> {
    let start = generated.iter().position(|&t| t == vocab::ANS)? + 1;
    let rest = &generated[start..];
    let end = rest.iter().position(|&t| t == vocab::EOS).unwrap_or(rest.len());
    Some(rest[..end].to_vec())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub correct: bool,
    pub generated: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    pub records: Vec<EvalRecord>,
}

/// Greedy-decode every prompt and score exact final-answer match. With an
/// intervention, positions are identified per example on the prompt alone
/// and the edit is applied on every decode step.
pub fn evaluate(
    model: &MicroTransformer,
    samples: &[TaskSample],
    intervention: Option<(&InterventionParams, &CrftConfig)>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset is empty".into()));
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut correct = 0usize;
    for (index, s) in samples.iter().enumerate() {
        let generated = decode_sample(model, s, intervention, None)?;
        let ok = extract_answer(&generated).as_deref() == Some(s.answer.as_slice());
        if ok {
            correct += 1;
        }
        records.push(EvalRecord {
            index,
            correct: ok,
            generated,
        });
    }
    Ok(EvalReport {
        accuracy: correct as f64 / samples.len() as f64,
        n: samples.len(),
        records,
    })
}

/// Decode one sample, optionally with a trained intervention and extra
/// additive noise edits layered on top.
fn decode_sample(
    model: &MicroTransformer,
    sample: &TaskSample,
    intervention: Option<(&InterventionParams, &CrftConfig)>,
    noise: Option<&[(usize, Vec<usize>, Vec<Vec<f64>>)]>,
) -> Result<Vec<u32>> {
    let max_new = sample.target.len() + 4;
    let set: Option<CriticalSet> = match intervention {
        Some((_, cfg)) => Some(identify(
            model,
            &sample.prompt,
            &sample.segments.prefix(sample.prompt.len()),
            cfg,
            None,
        )?),
        None => None,
    };
    let mut edits = EditMap::new();
    if let (Some(set), Some((params, _))) = (&set, intervention) {
        edits = set.edit_map(params, false);
    }
    if let Some(layers) = noise {
        for (layer, positions, vectors) in layers {
            // Noise probes and low-rank edits never target the same layer in
            // our experiments; keep the contract explicit.
            if edits.contains_key(layer) {
                return Err(Error::InvalidConfig(
                    "noise and intervention edits collide on a layer".into(),
                ));
            }
            edits.insert(
                *layer,
                LayerEditSpec::AddVectors {
                    positions,
                    vectors,
                },
            );
        }
    }
    let edits_opt = if edits.is_empty() { None } else { Some(&edits) };
    model.greedy_decode(&sample.prompt, max_new, edits_opt, Some(vocab::EOS))
}

// ── noise-asymmetry experiment ───────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetentionCurve {
    pub levels: Vec<f64>,
    pub top: Vec<f64>,
    pub bottom: Vec<f64>,
    pub top_k: usize,
    pub bottom_k: usize,
    pub n_examples: usize,
    pub trials: usize,
}

/// Retention of originally-correct examples when Gaussian noise is injected
/// at the top-k-scored vs bottom-k-scored positions of every intervened
/// layer.
#[allow(clippy::too_many_arguments)]
pub fn noise_experiment(
    model: &MicroTransformer,
    samples: &[TaskSample],
    identify_cfg: &CrftConfig,
    top_k: usize,
    bottom_k: usize,
    noise_levels: &[f64],
    trials: usize,
    seed: u64,
) -> Result<RetentionCurve> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    if matches!(identify_cfg.strategy, Strategy::Fixed | Strategy::Random) {
        return Err(Error::InvalidConfig(
            "noise experiment needs a scoring strategy".into(),
        ));
    }
    let layers = identify_cfg.layers_for(model.cfg.n_layers)?;

    // Keep only examples the unmodified model answers correctly.
    let mut kept: Vec<&TaskSample> = Vec::new();
    for s in samples {
        let generated = decode_sample(model, s, None, None)?;
        if extract_answer(&generated).as_deref() == Some(s.answer.as_slice()) {
            kept.push(s);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyInput(
            "no correctly-answered examples to perturb".into(),
        ));
    }

    // Rank prompt positions per (example, layer) by strategy score.
    struct Ranked {
        top: Vec<usize>,
        bottom: Vec<usize>,
    }
    let mut ranked: Vec<Vec<Ranked>> = Vec::with_capacity(kept.len());
    for s in &kept {
        let pass = identification_pass(
            model,
            &s.prompt,
            identify_cfg.strategy.needs_saliency(),
            None,
        )?;
        let mut per_layer = Vec::with_capacity(layers.len());
        for &layer in &layers {
            let scores = layer_scores(
                &pass.trace,
                pass.grads.as_ref(),
                identify_cfg,
                layer,
                model.cfg.n_layers,
            )?;
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let top: Vec<usize> = order.iter().take(top_k.min(order.len())).cloned().collect();
            let bottom: Vec<usize> = order
                .iter()
                .rev()
                .take(bottom_k.min(order.len()))
                .cloned()
                .collect();
            per_layer.push(Ranked { top, bottom });
        }
        ranked.push(per_layer);
    }

    let d = model.cfg.d_model;
    let mut top_curve = Vec::with_capacity(noise_levels.len());
    let mut bottom_curve = Vec::with_capacity(noise_levels.len());
    for (li, &sigma) in noise_levels.iter().enumerate() {
        for (set_tag, curve) in [(0u64, &mut top_curve), (1u64, &mut bottom_curve)] {
            let mut hits = 0usize;
            for (si, s) in kept.iter().enumerate() {
                for trial in 0..trials {
                    let mut noise_edits = Vec::with_capacity(layers.len());
                    for (layer_idx, &layer) in layers.iter().enumerate() {
                        let r = &ranked[si][layer_idx];
                        let positions = if set_tag == 0 { &r.top } else { &r.bottom };
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            seed ^ (li as u64) << 48
                                ^ set_tag << 40
                                ^ (si as u64) << 24
                                ^ (trial as u64) << 8
                                ^ layer as u64,
                        );
                        let vectors: Vec<Vec<f64>> = positions
                            .iter()
                            .map(|_| {
                                (0..d)
                                    .map(|_| {
                                        let z: f64 = StandardNormal.sample(&mut rng);
                                        z * sigma
                                    })
                                    .collect()
                            })
                            .collect();
                        noise_edits.push((layer, positions.clone(), vectors));
                    }
                    let generated = decode_sample(model, s, None, Some(&noise_edits))?;
                    if extract_answer(&generated).as_deref() == Some(s.answer.as_slice()) {
                        hits += 1;
                    }
                }
            }
            curve.push(hits as f64 / (kept.len() * trials) as f64);
        }
    }
    Ok(RetentionCurve {
        levels: noise_levels.to_vec(),
        top: top_curve,
        bottom: bottom_curve,
        top_k,
        bottom_k,
        n_examples: kept.len(),
        trials,
    })
}

// ── ablation grid ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Threshold,
    KInt,
    Criteria,
    LayerRange,
    RandomSeeds,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "threshold" => Ok(AblationAxis::Threshold),
            "k-int" | "kint" | "k_int" => Ok(AblationAxis::KInt),
            "criteria" => Ok(AblationAxis::Criteria),
            "layer-range" | "layers" | "layer_range" => Ok(AblationAxis::LayerRange),
            "random-seeds" | "seeds" | "random_seeds" => Ok(AblationAxis::RandomSeeds),
            other => Err(Error::InvalidConfig(format!("unknown ablation axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub accuracy: f64,
}

/// One row per grid cell: train with the modified config, evaluate on the
/// held-out set. The k_int = 0 cell is the untrained frozen baseline.
pub fn ablation_suite(
    model: &MicroTransformer,
    train_data: &[TaskSample],
    test_data: &[TaskSample],
    base_crft: &CrftConfig,
    base_train: &TrainConfig,
    axis: AblationAxis,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let run = |label: String, cfg: CrftConfig| -> Result<AblationRow> {
        let (params, _) = train_crft(model, train_data, &cfg, base_train, None)?;
        let report = evaluate(model, test_data, Some((&params, &cfg)))?;
        Ok(AblationRow {
            axis: format!("{axis:?}"),
            value: label,
            accuracy: report.accuracy,
        })
    };
    match axis {
        AblationAxis::Threshold => {
            for alpha in [1.0, 0.25, 0.05, 0.01] {
                let cfg = CrftConfig {
                    alpha,
                    beta: alpha,
                    ..base_crft.clone()
                };
                rows.push(run(format!("{alpha}"), cfg)?);
            }
        }
        AblationAxis::KInt => {
            for k in [0usize, 14, 20, 30] {
                if k == 0 {
                    let report = evaluate(model, test_data, None)?;
                    rows.push(AblationRow {
                        axis: format!("{axis:?}"),
                        value: "0".into(),
                        accuracy: report.accuracy,
                    });
                } else {
                    let cfg = CrftConfig {
                        k_int: k,
                        ..base_crft.clone()
                    };
                    rows.push(run(format!("{k}"), cfg)?);
                }
            }
        }
        AblationAxis::Criteria => {
            for criteria in [
                crate::infoflow::Criteria::Order,
                crate::infoflow::Criteria::Score,
                crate::infoflow::Criteria::Random,
            ] {
                let cfg = CrftConfig {
                    criteria,
                    ..base_crft.clone()
                };
                rows.push(run(format!("{criteria:?}").to_lowercase(), cfg)?);
            }
        }
        AblationAxis::LayerRange => {
            let last = model.cfg.n_layers - 1;
            let half = model.cfg.n_layers / 2;
            let ranges: Vec<(String, usize, usize)> = vec![
                ("first".into(), 0, 0),
                ("last".into(), last, last),
                ("first-half".into(), 0, half.saturating_sub(1).max(0)),
                ("second-half".into(), half.min(last), last),
                ("all".into(), 0, last),
            ];
            for (label, lo, hi) in ranges {
                let cfg = CrftConfig {
                    layer_lo: Some(lo),
                    layer_hi: Some(hi),
                    ..base_crft.clone()
                };
                rows.push(run(label, cfg)?);
            }
        }
        AblationAxis::RandomSeeds => {
            for seed in 37..=47u64 {
                let cfg = CrftConfig {
                    strategy: Strategy::Random,
                    seed,
                    ..base_crft.clone()
                };
                rows.push(run(format!("{seed}"), cfg)?);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn generator_is_deterministic() {
        let a = gen_chain_arith(50, 3, 10, 9).unwrap();
        let b = gen_chain_arith(50, 3, 10, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_rejects_bad_params() {
        assert!(gen_chain_arith(0, 3, 10, 1).is_err());
        assert!(gen_chain_arith(5, 1, 10, 1).is_err());
        assert!(gen_chain_arith(5, 3, 11, 1).is_err());
        // Tiny expression space cannot produce this many unique prompts.
        assert!(gen_chain_arith(100_000, 2, 2, 1).is_err());
    }

    #[test]
    fn answers_match_reevaluation() {
        // Re-evaluate each expression independently of the generator.
        for s in gen_chain_arith(200, 4, 10, 11).unwrap() {
            let expr = &s.prompt;
            assert_eq!(*expr.last().unwrap(), vocab::EQ);
            let mut acc = expr[0] as i64;
            let mut i = 1;
            while expr[i] != vocab::EQ {
                let d = expr[i + 1] as i64;
                acc = match expr[i] {
                    vocab::PLUS => (acc + d).rem_euclid(10),
                    vocab::MINUS => (acc - d).rem_euclid(10),
                    other => panic!("unexpected token {other}"),
                };
                i += 2;
            }
            assert_eq!(acc as u32, s.answer_value);
            assert_eq!(s.answer, vec![s.answer_value]);
        }
    }

    #[test]
    fn generator_audit_lengths_fit_max_seq() {
        let samples = gen_chain_arith(10_000, 4, 10, 21).unwrap();
        for s in &samples {
            let total = s.prompt.len() + s.target.len();
            assert!(total <= 64, "sample of {total} tokens");
            assert_eq!(s.segments.len(), total);
        }
    }

    #[test]
    fn few_shot_segments_partition() {
        let samples = gen_few_shot(20, 1, 3, 10, 5).unwrap();
        for s in &samples {
            let demo = s
                .segments
                .tags
                .iter()
                .filter(|t| **t == Segment::Demonstration)
                .count();
            let q = s
                .segments
                .tags
                .iter()
                .filter(|t| **t == Segment::Question)
                .count();
            let a = s
                .segments
                .tags
                .iter()
                .filter(|t| **t == Segment::Answer)
                .count();
            assert!(demo > 0);
            assert_eq!(q, 8); // 3-step expression plus "="
            assert_eq!(a, s.target.len());
            assert_eq!(demo + q, s.prompt.len());
        }
    }

    #[test]
    fn split_is_disjoint() {
        let samples = gen_chain_arith(100, 3, 10, 31).unwrap();
        let (train, val, test) = split3(samples, 0.6, 0.2);
        assert_eq!(train.len(), 60);
        assert_eq!(val.len(), 20);
        assert_eq!(test.len(), 20);
        let tp: HashSet<_> = train.iter().map(|s| s.prompt.clone()).collect();
        assert!(val.iter().all(|s| !tp.contains(&s.prompt)));
        assert!(test.iter().all(|s| !tp.contains(&s.prompt)));
    }

    #[test]
    fn dataset_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let samples = gen_few_shot(10, 1, 3, 10, 77).unwrap();
        save_dataset(&samples, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(samples, loaded);
    }

    #[test]
    fn extract_answer_parses_span() {
        use vocab::*;
        assert_eq!(extract_answer(&[3, SEP, 5, ANS, 7, EOS]), Some(vec![7]));
        assert_eq!(extract_answer(&[ANS, 1, 2]), Some(vec![1, 2]));
        assert_eq!(extract_answer(&[1, 2, 3]), None);
        assert_eq!(extract_answer(&[ANS, EOS]), Some(vec![]));
    }

    fn desk_model(seed: u64) -> MicroTransformer {
        MicroTransformer::new(
            ModelConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 16,
                d_ff: 32,
                vocab_size: vocab::SIZE,
                max_seq: 64,
                dropout: 0.0,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn evaluate_bounds_and_determinism() {
        let m = desk_model(3);
        let samples = gen_chain_arith(12, 3, 10, 5).unwrap();
        let a = evaluate(&m, &samples, None).unwrap();
        let b = evaluate(&m, &samples, None).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert!((0.0..=1.0).contains(&a.accuracy));
        assert!(evaluate(&m, &[], None).is_err());

        // A model whose head always emits the same non-digit token scores 0.
        let mut constant = desk_model(4);
        let v = constant.cfg.vocab_size;
        for c in 0..constant.cfg.d_model {
            for t in 0..v {
                constant.lm_head[c * v + t] = if t == vocab::SEP as usize { 10.0 } else { 0.0 };
            }
        }
        let r = evaluate(&constant, &samples, None).unwrap();
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn noise_experiment_zero_sigma_retains_everything() {
        let m = desk_model(6);
        let samples = gen_chain_arith(40, 2, 4, 13).unwrap();
        let cfg = CrftConfig {
            k_int: 2,
            ..CrftConfig::default()
        };
        match noise_experiment(&m, &samples, &cfg, 2, 2, &[0.0], 2, 1) {
            Ok(curve) => {
                assert_eq!(curve.top, vec![1.0]);
                assert_eq!(curve.bottom, vec![1.0]);
            }
            // An untrained model may answer nothing correctly; that error is
            // the documented contract.
            Err(Error::EmptyInput(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
