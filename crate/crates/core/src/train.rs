//! Optimization: linear-warmup/linear-decay schedule, AdamW, the
//! intervention training loop (base frozen), and base-model pretraining.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infoflow::{identify, CriticalSet, CrftConfig};
use crate::intervention::InterventionParams;
use crate::model::{ForwardOpts, MicroTransformer};
use crate::tasks::{evaluate, TaskSample};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 2,
            grad_accum_steps: 16,
            learning_rate: 9e-4,
            warmup_ratio: 0.0,
            weight_decay: 0.06,
            dropout: 0.05,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidConfig("warmup_ratio must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size and grad_accum_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Linear ramp to `learning_rate` over the warmup fraction, then linear
/// decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidConfig("total_steps must be >= 1".into()));
    }
    let warmup = cfg.warmup_ratio * total_steps as f64;
    let s = step as f64;
    Ok(if s < warmup {
        cfg.learning_rate * s / warmup
    } else {
        cfg.learning_rate * (total_steps as f64 - s) / (total_steps as f64 - warmup)
    })
}

// ── optimizer ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Decoupled-weight-decay adaptive optimizer, keyed by caller-chosen names.
#[derive(Debug)]
pub struct AdamW<K: Ord> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: BTreeMap<K, AdamSlot>,
}

impl<K: Ord + Clone> AdamW<K> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn from_train_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// Advance the shared step counter (bias correction) once per optimizer
    /// step, before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(
        &mut self,
        key: &K,
        param: &mut [f64],
        grad: &[f64],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer update: {} params vs {} grads",
                param.len(),
                grad.len()
            )));
        }
        let slot = self.slots.entry(key.clone()).or_insert_with(|| AdamSlot {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        if slot.m.len() != param.len() {
            return Err(Error::ShapeMismatch("optimizer state shape drifted".into()));
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..param.len() {
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * grad[i];
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            param[i] -= lr * weight_decay * param[i];
            param[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

// ── run history ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl RunHistory {
    /// One JSON object per optimizer step: {step, loss, lr, grad_norm}.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

// ── intervention training ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum ParamTensor {
    R,
    W,
    B,
}

type ParamKey = (usize, usize, ParamTensor);

fn derive_rng(seed: u64, a: u64, b: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a)
        .rotate_left(23)
        .wrapping_mul(0xD1B5_4A32_D192_ED03)
        .wrapping_add(b);
    rand_chacha::ChaCha8Rng::seed_from_u64(mixed)
}

/// Supervised fine-tuning of intervention parameters with the base frozen.
///
/// Per example: identify positions on the frozen base (teacher-forced
/// sequence, ground-truth labels for saliency), forward with edits, score
/// cross-entropy on the answer span only, and accumulate gradients that can
/// only reach the intervention parameters. The base digest is checked
/// end-to-end.
pub fn train_crft(
    model: &MicroTransformer,
    train_data: &[TaskSample],
    crft_cfg: &CrftConfig,
    train_cfg: &TrainConfig,
    val_data: Option<&[TaskSample]>,
) -> Result<(InterventionParams, RunHistory)> {
    if train_data.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty".into()));
    }
    crft_cfg.validate()?;
    train_cfg.validate()?;
    let digest_before = model.freeze_digest();

    let layers = crft_cfg.layers_for(model.cfg.n_layers)?;
    let mut params = InterventionParams::init(
        model.cfg.d_model,
        crft_cfg.rank,
        &layers,
        crft_cfg.n_groups(),
        crft_cfg.train_r,
        train_cfg.seed,
    )?;

    let n = train_data.len();
    let window = train_cfg.batch_size * train_cfg.grad_accum_steps;
    let total_steps = (train_cfg.epochs * n).div_ceil(window);
    let mut opt: AdamW<ParamKey> = AdamW::from_train_config(train_cfg);
    let mut history = RunHistory::default();

    let mut accum: BTreeMap<ParamKey, Vec<f64>> = BTreeMap::new();
    let mut accum_examples = 0usize;
    let mut window_loss = 0.0f64;
    let mut step = 0usize;

    let flush_step = |params: &mut InterventionParams,
                          opt: &mut AdamW<ParamKey>,
                          accum: &mut BTreeMap<ParamKey, Vec<f64>>,
                          accum_examples: &mut usize,
                          window_loss: &mut f64,
                          step: &mut usize,
                          history: &mut RunHistory|
     -> Result<()> {
        if *accum_examples == 0 {
            return Ok(());
        }
        let scale = 1.0 / *accum_examples as f64;
        let mut sq_norm = 0.0;
        for g in accum.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
                sq_norm += *v * *v;
            }
        }
        let lr = lr_at(*step, total_steps, train_cfg)?;
        opt.begin_step();
        for (key, grad) in accum.iter() {
            let (layer, group, which) = *key;
            let edit = params
                .edits
                .get_mut(&(layer, group))
                .expect("gradient key refers to an existing edit");
            let tensor = match which {
                ParamTensor::R => &mut edit.r_rows,
                ParamTensor::W => &mut edit.w,
                ParamTensor::B => &mut edit.b,
            };
            opt.update(key, tensor, grad, lr, train_cfg.weight_decay)?;
        }
        if params.train_r {
            params.reorthonormalize()?;
        }
        history.steps.push(StepRecord {
            step: *step,
            loss: *window_loss / *accum_examples as f64,
            lr,
            grad_norm: sq_norm.sqrt(),
        });
        *step += 1;
        accum.clear();
        *accum_examples = 0;
        *window_loss = 0.0;
        Ok(())
    };

    for epoch in 0..train_cfg.epochs {
        // Identification is cached per example within an epoch and recomputed
        // across epochs.
        let mut ident_cache: Vec<Option<CriticalSet>> = vec![None; n];
        for (idx, sample) in train_data.iter().enumerate() {
            let full = sample.full_tokens();
            if ident_cache[idx].is_none() {
                let pairs = sample.next_token_pairs();
                ident_cache[idx] = Some(identify(
                    model,
                    &full,
                    &sample.segments,
                    crft_cfg,
                    Some(&pairs),
                )?);
            }
            let set = ident_cache[idx].as_ref().unwrap();

            let mut tape = Tape::new();
            let mut rng = derive_rng(train_cfg.seed, epoch as u64, idx as u64);
            let edits = set.edit_map(&params, true);
            let mut opts = ForwardOpts::train(&mut rng);
            opts.dropout_override = Some(train_cfg.dropout);
            let trace = model.forward(&mut tape, &full, Some(&edits), opts)?;
            let loss_id = tape.cross_entropy(trace.logits_id, &sample.answer_loss_pairs())?;
            let loss = tape.data(loss_id)[0];
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, value: loss });
            }
            let grads = tape.backward(loss_id)?;

            // The base must be unreachable by construction; prove it per step.
            for (name, id) in &trace.base_ids {
                if grads.get(*id).is_some() {
                    return Err(Error::InvalidConfig(format!(
                        "gradient leaked into frozen base tensor {name}"
                    )));
                }
            }

            for ((layer, group), ids) in &trace.bound {
                let mut take = |which: ParamTensor, id| {
                    if let Some(g) = grads.get(id) {
                        let slot = accum
                            .entry((*layer, *group, which))
                            .or_insert_with(|| vec![0.0; g.len()]);
                        for (s, v) in slot.iter_mut().zip(g) {
                            *s += v;
                        }
                    }
                };
                take(ParamTensor::W, ids.w);
                take(ParamTensor::B, ids.b);
                if params.train_r {
                    take(ParamTensor::R, ids.r);
                }
            }
            window_loss += loss;
            accum_examples += 1;
            if accum_examples == window {
                flush_step(
                    &mut params,
                    &mut opt,
                    &mut accum,
                    &mut accum_examples,
                    &mut window_loss,
                    &mut step,
                    &mut history,
                )?;
            }
        }
        let val_accuracy = match val_data {
            Some(vd) if !vd.is_empty() => {
                Some(evaluate(model, vd, Some((&params, crft_cfg)))?.accuracy)
            }
            _ => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            val_accuracy,
        });
    }
    flush_step(
        &mut params,
        &mut opt,
        &mut accum,
        &mut accum_examples,
        &mut window_loss,
        &mut step,
        &mut history,
    )?;

    if model.freeze_digest() != digest_before {
        return Err(Error::BaseModelMutated);
    }
    Ok((params, history))
}

// ── base pretraining ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop as soon as held-out accuracy enters this band.
    pub target_band: Option<(f64, f64)>,
    /// Optimizer steps between held-out accuracy checks.
    pub check_every: usize,
    pub max_grad_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_ratio: 0.02,
            weight_decay: 0.01,
            seed: 42,
            target_band: Some((0.40, 0.60)),
            check_every: 25,
            max_grad_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub val_accuracy: f64,
    pub steps: usize,
    pub stopped_in_band: bool,
    pub history: RunHistory,
}

/// Standard next-token training of every base weight, with frequent held-out
/// checks so the run can stop inside a deliberate mid-range accuracy band.
pub fn pretrain_base(
    model: &mut MicroTransformer,
    train_data: &[TaskSample],
    val_data: &[TaskSample],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::EmptyInput("pretraining needs train and val data".into()));
    }
    let sched = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        grad_accum_steps: 1,
        learning_rate: cfg.learning_rate,
        warmup_ratio: cfg.warmup_ratio,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let n = train_data.len();
    let total_steps = (cfg.epochs * n).div_ceil(cfg.batch_size);
    let mut opt: AdamW<String> = AdamW::from_train_config(&sched);
    let mut history = RunHistory::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        for chunk in train_data.chunks(cfg.batch_size) {
            let mut accum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for (bi, sample) in chunk.iter().enumerate() {
                let full = sample.full_tokens();
                let mut tape = Tape::new();
                let mut rng = derive_rng(cfg.seed, (epoch * n + step) as u64, bi as u64);
                let trace = model.forward(&mut tape, &full, None, ForwardOpts::pretrain(&mut rng))?;
                // Score the continuation only: prompt tokens are inherently
                // unpredictable and would drown the trainable signal in noise.
                let loss_id = tape.cross_entropy(trace.logits_id, &sample.answer_loss_pairs())?;
                let loss = tape.data(loss_id)[0];
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step, value: loss });
                }
                batch_loss += loss;
                let grads = tape.backward(loss_id)?;
                for (name, id) in &trace.base_ids {
                    if let Some(g) = grads.get(*id) {
                        let slot = accum
                            .entry(name.clone())
                            .or_insert_with(|| vec![0.0; g.len()]);
                        for (s, v) in slot.iter_mut().zip(g) {
                            *s += v;
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut sq_norm = 0.0;
            for g in accum.values_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                    sq_norm += *v * *v;
                }
            }
            let mut grad_norm = sq_norm.sqrt();
            if let Some(clip) = cfg.max_grad_norm {
                if grad_norm > clip {
                    let s = clip / grad_norm;
                    for g in accum.values_mut() {
                        for v in g.iter_mut() {
                            *v *= s;
                        }
                    }
                    grad_norm = clip;
                }
            }
            let lr = lr_at(step, total_steps, &sched)?;
            opt.begin_step();
            {
                let mut named: BTreeMap<String, &mut Vec<f64>> =
                    model.named_tensors_mut().into_iter().collect();
                for (name, grad) in &accum {
                    let param = named
                        .get_mut(name)
                        .ok_or_else(|| Error::InvalidConfig(format!("unknown tensor {name}")))?;
                    opt.update(name, param, grad, lr, cfg.weight_decay)?;
                }
            }
            history.steps.push(StepRecord {
                step,
                loss: batch_loss / chunk.len() as f64,
                lr,
                grad_norm,
            });
            step += 1;
            model.train_steps += 1;

            if step % cfg.check_every == 0 {
                let acc = evaluate(model, val_data, None)?.accuracy;
                history.epochs.push(EpochRecord {
                    epoch,
                    val_accuracy: Some(acc),
                });
                if let Some((lo, hi)) = cfg.target_band {
                    if acc >= lo && acc <= hi {
                        return Ok(PretrainOutcome {
                            val_accuracy: acc,
                            steps: step,
                            stopped_in_band: true,
                            history,
                        });
                    }
                }
            }
        }
    }
    let final_acc = evaluate(model, val_data, None)?.accuracy;
    let stopped_in_band = cfg
        .target_band
        .map(|(lo, hi)| final_acc >= lo && final_acc <= hi)
        .unwrap_or(false);
    Ok(PretrainOutcome {
        val_accuracy: final_acc,
        steps: step,
        stopped_in_band,
        history,
    })
}
