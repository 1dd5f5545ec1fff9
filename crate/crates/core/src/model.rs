//! Decoder-only micro-transformer with per-layer trace capture and
//! position-targeted interventions.
//!
//! Pre-norm blocks, learned positional embeddings, GELU feed-forward. Every
//! post-softmax attention matrix is a first-class taped tensor marked for
//! gradient capture, so saliency scores can read dL/dA directly. Interventions
//! replace selected rows of a block's residual-stream output before the next
//! layer consumes them.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::intervention::InterventionParams;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale default used throughout the experiments.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            max_seq: 64,
            dropout: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_seq == 0
        {
            return Err(Error::InvalidConfig("all model dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroTransformer {
    pub cfg: ModelConfig,
    pub tok_embed: Vec<f64>,
    pub pos_embed: Vec<f64>,
    pub blocks: Vec<BlockWeights>,
    pub ln_f_gamma: Vec<f64>,
    pub ln_f_beta: Vec<f64>,
    pub lm_head: Vec<f64>,
    pub train_steps: u64,
    pub seed: u64,
}

/// Edits to apply to one layer's residual-stream output.
#[derive(Debug)]
pub enum LayerEditSpec<'a> {
    /// Low-rank edit h + Rᵀ(Wh + b − Rh) at each non-sentinel position.
    /// `groups[i]` selects the parameter set for `positions[i]`; sentinel
    /// (-1) slots are skipped.
    LowRank {
        positions: &'a [i64],
        groups: &'a [i64],
        params: &'a InterventionParams,
        trainable: bool,
    },
    /// Add a fixed vector to each listed position (noise probes).
    AddVectors {
        positions: &'a [usize],
        vectors: &'a [Vec<f64>],
    },
}

pub type EditMap<'a> = BTreeMap<usize, LayerEditSpec<'a>>;

/// Tape ids of one bound low-rank parameter set.
#[derive(Debug, Clone, Copy)]
pub struct BoundLowRank {
    pub r: TensorId,
    pub w: TensorId,
    pub b: TensorId,
}

/// Everything captured from one forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    pub n_tokens: usize,
    /// (L+1) entries of n x d values; index 0 is embedding + positions.
    pub hidden: Vec<Vec<f64>>,
    /// L x H post-softmax matrices, each n x n.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// n x V.
    pub logits: Vec<f64>,
    pub attn_ids: Vec<Vec<TensorId>>,
    pub hidden_ids: Vec<TensorId>,
    pub logits_id: TensorId,
    /// Tape ids of bound intervention parameters, keyed by (layer, group).
    pub bound: BTreeMap<(usize, usize), BoundLowRank>,
    /// Tape ids of base weights when the pass tracks them (pretraining).
    pub base_ids: Vec<(String, TensorId)>,
}

/// Additive probe on one post-softmax attention cell. Lets finite
/// differences measure dL/dA without touching the backward path.
#[derive(Debug, Clone, Copy)]
pub struct AttnProbe {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

pub struct ForwardOpts<'r> {
    pub mode: Mode,
    /// Register base weights as gradient leaves (base pretraining).
    pub train_base: bool,
    /// Replaces the model's configured dropout for this pass.
    pub dropout_override: Option<f64>,
    pub attn_probe: Option<AttnProbe>,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> ForwardOpts<'r> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            train_base: false,
            dropout_override: None,
            attn_probe: None,
            rng: None,
        }
    }

    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            mode: Mode::Train,
            train_base: false,
            dropout_override: None,
            attn_probe: None,
            rng: Some(rng),
        }
    }

    pub fn pretrain(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            mode: Mode::Train,
            train_base: true,
            dropout_override: None,
            attn_probe: None,
            rng: Some(rng),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

impl MicroTransformer {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let std = 0.02;
        let tok_embed = gaussian(&mut rng, cfg.vocab_size * d, std);
        let pos_embed = gaussian(&mut rng, cfg.max_seq * d, std);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(BlockWeights {
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                wq: gaussian(&mut rng, d * d, std),
                bq: vec![0.0; d],
                wk: gaussian(&mut rng, d * d, std),
                bk: vec![0.0; d],
                wv: gaussian(&mut rng, d * d, std),
                bv: vec![0.0; d],
                wo: gaussian(&mut rng, d * d, std),
                bo: vec![0.0; d],
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                w1: gaussian(&mut rng, d * cfg.d_ff, std),
                b1: vec![0.0; cfg.d_ff],
                w2: gaussian(&mut rng, cfg.d_ff * d, std),
                b2: vec![0.0; d],
            });
        }
        let ln_f_gamma = vec![1.0; d];
        let ln_f_beta = vec![0.0; d];
        let lm_head = gaussian(&mut rng, d * cfg.vocab_size, std);
        Ok(Self {
            cfg,
            tok_embed,
            pos_embed,
            blocks,
            ln_f_gamma,
            ln_f_beta,
            lm_head,
            train_steps: 0,
            seed,
        })
    }

    /// All weight tensors with stable names and shapes, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        let d = self.cfg.d_model;
        let ff = self.cfg.d_ff;
        let v = self.cfg.vocab_size;
        let mut out: Vec<(String, Vec<usize>, &Vec<f64>)> = vec![
            ("tok_embed".into(), vec![v, d], &self.tok_embed),
            ("pos_embed".into(), vec![self.cfg.max_seq, d], &self.pos_embed),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |name: &str| format!("layer{l}.{name}");
            out.push((p("ln1_gamma"), vec![d], &b.ln1_gamma));
            out.push((p("ln1_beta"), vec![d], &b.ln1_beta));
            out.push((p("wq"), vec![d, d], &b.wq));
            out.push((p("bq"), vec![d], &b.bq));
            out.push((p("wk"), vec![d, d], &b.wk));
            out.push((p("bk"), vec![d], &b.bk));
            out.push((p("wv"), vec![d, d], &b.wv));
            out.push((p("bv"), vec![d], &b.bv));
            out.push((p("wo"), vec![d, d], &b.wo));
            out.push((p("bo"), vec![d], &b.bo));
            out.push((p("ln2_gamma"), vec![d], &b.ln2_gamma));
            out.push((p("ln2_beta"), vec![d], &b.ln2_beta));
            out.push((p("w1"), vec![d, ff], &b.w1));
            out.push((p("b1"), vec![ff], &b.b1));
            out.push((p("w2"), vec![ff, d], &b.w2));
            out.push((p("b2"), vec![d], &b.b2));
        }
        out.push(("ln_f_gamma".into(), vec![d], &self.ln_f_gamma));
        out.push(("ln_f_beta".into(), vec![d], &self.ln_f_beta));
        out.push(("lm_head".into(), vec![d, v], &self.lm_head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("tok_embed".into(), &mut self.tok_embed),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = |name: &str| format!("layer{l}.{name}");
            out.push((p("ln1_gamma"), &mut b.ln1_gamma));
            out.push((p("ln1_beta"), &mut b.ln1_beta));
            out.push((p("wq"), &mut b.wq));
            out.push((p("bq"), &mut b.bq));
            out.push((p("wk"), &mut b.wk));
            out.push((p("bk"), &mut b.bk));
            out.push((p("wv"), &mut b.wv));
            out.push((p("bv"), &mut b.bv));
            out.push((p("wo"), &mut b.wo));
            out.push((p("bo"), &mut b.bo));
            out.push((p("ln2_gamma"), &mut b.ln2_gamma));
            out.push((p("ln2_beta"), &mut b.ln2_beta));
            out.push((p("w1"), &mut b.w1));
            out.push((p("b1"), &mut b.b1));
            out.push((p("w2"), &mut b.w2));
            out.push((p("b2"), &mut b.b2));
        }
        out.push(("ln_f_gamma".into(), &mut self.ln_f_gamma));
        out.push(("ln_f_beta".into(), &mut self.ln_f_beta));
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    /// Deterministic digest over the configuration and every base weight.
    /// Any single-weight perturbation changes the digest.
    pub fn freeze_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"crft-model-v1");
        hasher.update(serde_json::to_string(&self.cfg).expect("config serializes").as_bytes());
        for (name, _, data) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn dropout_applied(
        tape: &mut Tape,
        x: TensorId,
        p: f64,
        mode: Mode,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        if mode != Mode::Train || p <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        let n = tape.tensor(x).numel();
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rand::Rng::gen::<f64>(rng) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let shape = tape.shape(x).to_vec();
        let m = tape.constant(&shape, mask)?;
        tape.mul(x, m)
    }

    /// One full pass. Captures all hidden states, per-head attention, and logits;
    /// applies edits to the residual stream at the output of each listed layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        edits: Option<&EditMap>,
        mut opts: ForwardOpts,
    ) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::EmptyInput("forward on empty token list".into()));
        }
        if n > cfg.max_seq {
            return Err(Error::IndexOutOfRange(format!(
                "sequence length {n} exceeds max_seq {}",
                cfg.max_seq
            )));
        }
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::IndexOutOfRange(format!(
                    "token {t} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
        }
        if let Some(map) = edits {
            for (&layer, spec) in map {
                if layer >= cfg.n_layers {
                    return Err(Error::IndexOutOfRange(format!(
                        "intervened layer {layer} of {}",
                        cfg.n_layers
                    )));
                }
                let check = |p: i64| -> Result<()> {
                    if p >= n as i64 {
                        return Err(Error::IndexOutOfRange(format!(
                            "intervention position {p} beyond sequence length {n}"
                        )));
                    }
                    Ok(())
                };
                match spec {
                    LayerEditSpec::LowRank { positions, .. } => {
                        for &p in *positions {
                            check(p)?;
                        }
                    }
                    LayerEditSpec::AddVectors { positions, .. } => {
                        for &p in *positions {
                            check(p as i64)?;
                        }
                    }
                }
            }
        }

        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let train_base = opts.train_base;
        let reg = |tape: &mut Tape, shape: &[usize], data: &Vec<f64>| -> Result<TensorId> {
            tape.leaf(shape, data.clone(), train_base)
        };

        let drop_p = opts.dropout_override.unwrap_or(cfg.dropout);
        let tok_t = reg(tape, &[cfg.vocab_size, d], &self.tok_embed)?;
        let pos_t = reg(tape, &[cfg.max_seq, d], &self.pos_embed)?;
        let mut base_ids: Vec<(String, TensorId)> =
            vec![("tok_embed".into(), tok_t), ("pos_embed".into(), pos_t)];

        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = tape.gather_rows(tok_t, &idx)?;
        let pos_rows: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(pos_t, &pos_rows)?;
        let mut x = tape.add(emb, pos)?;

        let mut hidden = vec![tape.data(x).to_vec()];
        let mut hidden_ids = vec![x];
        let mut attention = Vec::with_capacity(cfg.n_layers);
        let mut attn_ids = Vec::with_capacity(cfg.n_layers);
        let mut bound = BTreeMap::new();

        for (l, blk) in self.blocks.iter().enumerate() {
            let p = |name: &str| format!("layer{l}.{name}");
            let ln1_g = reg(tape, &[d], &blk.ln1_gamma)?;
            let ln1_b = reg(tape, &[d], &blk.ln1_beta)?;
            let wq = reg(tape, &[d, d], &blk.wq)?;
            let bq = reg(tape, &[d], &blk.bq)?;
            let wk = reg(tape, &[d, d], &blk.wk)?;
            let bk = reg(tape, &[d], &blk.bk)?;
            let wv = reg(tape, &[d, d], &blk.wv)?;
            let bv = reg(tape, &[d], &blk.bv)?;
            let wo = reg(tape, &[d, d], &blk.wo)?;
            let bo = reg(tape, &[d], &blk.bo)?;
            let ln2_g = reg(tape, &[d], &blk.ln2_gamma)?;
            let ln2_b = reg(tape, &[d], &blk.ln2_beta)?;
            let w1 = reg(tape, &[d, cfg.d_ff], &blk.w1)?;
            let b1 = reg(tape, &[cfg.d_ff], &blk.b1)?;
            let w2 = reg(tape, &[cfg.d_ff, d], &blk.w2)?;
            let b2 = reg(tape, &[d], &blk.b2)?;
            {
                for (name, id) in [
                    ("ln1_gamma", ln1_g),
                    ("ln1_beta", ln1_b),
                    ("wq", wq),
                    ("bq", bq),
                    ("wk", wk),
                    ("bk", bk),
                    ("wv", wv),
                    ("bv", bv),
                    ("wo", wo),
                    ("bo", bo),
                    ("ln2_gamma", ln2_g),
                    ("ln2_beta", ln2_b),
                    ("w1", w1),
                    ("b1", b1),
                    ("w2", w2),
                    ("b2", b2),
                ] {
                    base_ids.push((p(name), id));
                }
            }

            // Attention sublayer.
            let xn = tape.layer_norm(x, ln1_g, ln1_b)?;
            let q = tape.matmul(xn, wq)?;
            let q = tape.add_row(q, bq)?;
            let k = tape.matmul(xn, wk)?;
            let k = tape.add_row(k, bk)?;
            let v = tape.matmul(xn, wv)?;
            let v = tape.add_row(v, bv)?;

            let mut head_ctx = Vec::with_capacity(cfg.n_heads);
            let mut layer_attn = Vec::with_capacity(cfg.n_heads);
            let mut layer_attn_ids = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let a = tape.softmax_causal(scores)?;
                // Attention stays a first-class taped tensor: saliency needs
                // dL/dA even when every weight is frozen.
                tape.mark_grad(a);
                layer_attn.push(tape.data(a).to_vec());
                layer_attn_ids.push(a);
                let a_used = match opts.attn_probe {
                    Some(pr) if pr.layer == l && pr.head == h => {
                        let mut delta = vec![0.0; n * n];
                        delta[pr.row * n + pr.col] = pr.delta;
                        let dt = tape.constant(&[n, n], delta)?;
                        tape.add(a, dt)?
                    }
                    _ => a,
                };
                head_ctx.push(tape.matmul(a_used, vh)?);
            }
            attention.push(layer_attn);
            attn_ids.push(layer_attn_ids);

            let ctx = tape.concat_cols(&head_ctx)?;
            let proj = tape.matmul(ctx, wo)?;
            let proj = tape.add_row(proj, bo)?;
            let proj = Self::dropout_applied(tape, proj, drop_p, opts.mode, &mut opts.rng)?;
            x = tape.add(x, proj)?;

            // Feed-forward sublayer.
            let yn = tape.layer_norm(x, ln2_g, ln2_b)?;
            let ff = tape.matmul(yn, w1)?;
            let ff = tape.add_row(ff, b1)?;
            let ff = tape.gelu(ff);
            let ff = tape.matmul(ff, w2)?;
            let ff = tape.add_row(ff, b2)?;
            let ff = Self::dropout_applied(tape, ff, drop_p, opts.mode, &mut opts.rng)?;
            x = tape.add(x, ff)?;

            // Residual-stream edit at this layer's output.
            if let Some(spec) = edits.and_then(|m| m.get(&l)) {
                x = self.apply_edit(tape, x, l, spec, &mut bound, drop_p, opts.mode, &mut opts.rng)?;
            }

            hidden.push(tape.data(x).to_vec());
            hidden_ids.push(x);
        }

        let lnf_g = reg(tape, &[d], &self.ln_f_gamma)?;
        let lnf_b = reg(tape, &[d], &self.ln_f_beta)?;
        let head = reg(tape, &[d, cfg.vocab_size], &self.lm_head)?;
        base_ids.push(("ln_f_gamma".into(), lnf_g));
        base_ids.push(("ln_f_beta".into(), lnf_b));
        base_ids.push(("lm_head".into(), head));
        let xf = tape.layer_norm(x, lnf_g, lnf_b)?;
        let logits_id = tape.matmul(xf, head)?;

        Ok(ForwardTrace {
            n_tokens: n,
            hidden,
            attention,
            logits: tape.data(logits_id).to_vec(),
            attn_ids,
            hidden_ids,
            logits_id,
            bound,
        base_ids,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_edit(
        &self,
        tape: &mut Tape,
        x: TensorId,
        layer: usize,
        spec: &LayerEditSpec,
        bound: &mut BTreeMap<(usize, usize), BoundLowRank>,
        drop_p: f64,
        mode: Mode,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        match spec {
            LayerEditSpec::AddVectors { positions, vectors } => {
                if positions.is_empty() {
                    return Ok(x);
                }
                if positions.len() != vectors.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} positions vs {} vectors",
                        positions.len(),
                        vectors.len()
                    )));
                }
                let d = self.cfg.d_model;
                let sel = tape.gather_rows(x, positions)?;
                let mut noise = Vec::with_capacity(positions.len() * d);
                for v in vectors.iter() {
                    if v.len() != d {
                        return Err(Error::ShapeMismatch(format!(
                            "noise vector of {} entries, expected {d}",
                            v.len()
                        )));
                    }
                    noise.extend_from_slice(v);
                }
                let nz = tape.constant(&[positions.len(), d], noise)?;
                let edited = tape.add(sel, nz)?;
                tape.replace_rows(x, edited, positions)
            }
            LayerEditSpec::LowRank {
                positions,
                groups,
                params,
                trainable,
            } => {
                if positions.len() != groups.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} positions vs {} group tags",
                        positions.len(),
                        groups.len()
                    )));
                }
                // Bucket real positions by parameter group; sentinels skipped.
                let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (&p, &g) in positions.iter().zip(groups.iter()) {
                    if p < 0 {
                        continue;
                    }
                    let g = if g < 0 { 0 } else { g as usize };
                    by_group.entry(g).or_default().push(p as usize);
                }
                if by_group.is_empty() {
                    return Ok(x);
                }
                let d = self.cfg.d_model;
                let r = params.rank;
                let mut out = x;
                for (group, rows) in by_group {
                    let edit = params.edit(layer, group).ok_or_else(|| {
                        Error::IndexOutOfRange(format!(
                            "no intervention parameters for layer {layer} group {group}"
                        ))
                    })?;
                    let key = (layer, group);
                    let ids = if let Some(ids) = bound.get(&key) {
                        *ids
                    } else {
                        let r_id = tape.leaf(&[r, d], edit.r_rows.clone(), *trainable && params.train_r)?;
                        let w_id = tape.leaf(&[r, d], edit.w.clone(), *trainable)?;
                        let b_id = tape.leaf(&[r], edit.b.clone(), *trainable)?;
                        let ids = BoundLowRank { r: r_id, w: w_id, b: b_id };
                        bound.insert(key, ids);
                        ids
                    };
                    let sel = tape.gather_rows(out, &rows)?;
                    let rt = tape.transpose(ids.r)?;
                    let wt = tape.transpose(ids.w)?;
                    let proj = tape.matmul(sel, rt)?;
                    let src = tape.matmul(sel, wt)?;
                    let src = tape.add_row(src, ids.b)?;
                    // Dropout regularizes only the learned source projection.
                    let src = Self::dropout_applied(tape, src, drop_p, mode, rng)?;
                    let delta = tape.sub(src, proj)?;
                    let delta = tape.matmul(delta, ids.r)?;
                    let edited = tape.add(sel, delta)?;
                    out = tape.replace_rows(out, edited, &rows)?;
                }
                Ok(out)
            }
        }
    }

    /// Greedy decoding: argmax of the final position's logits each step.
    /// Edits (identified on the prompt) are re-applied on every step.
    pub fn greedy_decode(
        &self,
        prompt: &[u32],
        max_new: usize,
        edits: Option<&EditMap>,
        stop_token: Option<u32>,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("empty prompt".into()));
        }
        if max_new == 0 {
            return Err(Error::InvalidConfig("max_new must be >= 1".into()));
        }
        if prompt.len() > self.cfg.max_seq {
            return Err(Error::IndexOutOfRange(format!(
                "prompt of {} exceeds max_seq {}",
                prompt.len(),
                self.cfg.max_seq
            )));
        }
        let mut tokens = prompt.to_vec();
        let mut generated = Vec::new();
        for _ in 0..max_new {
            if tokens.len() >= self.cfg.max_seq {
                break;
            }
            let mut tape = Tape::new();
            let trace = self.forward(&mut tape, &tokens, edits, ForwardOpts::eval())?;
            let v = self.cfg.vocab_size;
            let row = &trace.logits[(trace.n_tokens - 1) * v..trace.n_tokens * v];
            let mut best = 0usize;
            for j in 1..v {
                if row[j] > row[best] {
                    best = j;
                }
            }
            let tok = best as u32;
            generated.push(tok);
            tokens.push(tok);
            if Some(tok) == stop_token {
                break;
            }
        }
        Ok(generated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            max_seq: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.d_model = 9; // not divisible by 2 heads
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.dropout = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trace_shape_contract() {
        let m = MicroTransformer::new(tiny_cfg(), 1).unwrap();
        let mut tape = Tape::new();
        let tokens = [1u32, 2, 3, 4, 5];
        let trace = m.forward(&mut tape, &tokens, None, ForwardOpts::eval()).unwrap();
        assert_eq!(trace.hidden.len(), 3);
        assert!(trace.hidden.iter().all(|h| h.len() == 5 * 8));
        assert_eq!(trace.attention.len(), 2);
        assert!(trace.attention.iter().all(|l| l.len() == 2));
        assert!(trace
            .attention
            .iter()
            .all(|l| l.iter().all(|a| a.len() == 25)));
        assert_eq!(trace.logits.len(), 5 * 11);
    }

    #[test]
    fn attention_rows_causal_and_stochastic() {
        let m = MicroTransformer::new(tiny_cfg(), 2).unwrap();
        let mut tape = Tape::new();
        let tokens = [3u32, 1, 4, 1, 5, 9];
        let n = tokens.len();
        let trace = m.forward(&mut tape, &tokens, None, ForwardOpts::eval()).unwrap();
        for layer in &trace.attention {
            for head in layer {
                // Position 0 attends only to itself.
                assert_eq!(head[0], 1.0);
                for j in 1..n {
                    assert_eq!(head[j], 0.0);
                }
                for i in 0..n {
                    let sum: f64 = (0..=i).map(|j| head[i * n + j]).sum();
                    assert!((sum - 1.0).abs() <= 1e-12);
                    for j in i + 1..n {
                        assert_eq!(head[i * n + j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn hidden_zero_is_embedding_plus_positions() {
        let m = MicroTransformer::new(tiny_cfg(), 3).unwrap();
        let mut tape = Tape::new();
        let tokens = [7u32, 0, 2];
        let trace = m.forward(&mut tape, &tokens, None, ForwardOpts::eval()).unwrap();
        let d = 8;
        for (i, &t) in tokens.iter().enumerate() {
            for c in 0..d {
                let expected = m.tok_embed[t as usize * d + c] + m.pos_embed[i * d + c];
                assert_eq!(trace.hidden[0][i * d + c], expected);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_tokens_and_positions() {
        let m = MicroTransformer::new(tiny_cfg(), 4).unwrap();
        let mut tape = Tape::new();
        assert!(m
            .forward(&mut tape, &[11u32], None, ForwardOpts::eval())
            .is_err());

        let params = InterventionParams::init(8, 2, &[0], 1, false, 9).unwrap();
        let positions = [5i64];
        let groups = [0i64];
        let mut edits = EditMap::new();
        edits.insert(
            0,
            LayerEditSpec::LowRank {
                positions: &positions,
                groups: &groups,
                params: &params,
                trainable: false,
            },
        );
        let mut tape = Tape::new();
        assert!(m
            .forward(&mut tape, &[1u32, 2], Some(&edits), ForwardOpts::eval())
            .is_err());
    }

    #[test]
    fn sentinel_only_edit_is_bit_identical_to_no_edit() {
        let m = MicroTransformer::new(tiny_cfg(), 5).unwrap();
        let tokens = [1u32, 2, 3, 4];
        let params = InterventionParams::init(8, 2, &[0, 1], 1, false, 10).unwrap();
        let positions = [-1i64, -1];
        let groups = [0i64, 0];
        let mut edits = EditMap::new();
        for l in 0..2 {
            edits.insert(
                l,
                LayerEditSpec::LowRank {
                    positions: &positions,
                    groups: &groups,
                    params: &params,
                    trainable: false,
                },
            );
        }
        let mut t1 = Tape::new();
        let a = m.forward(&mut t1, &tokens, None, ForwardOpts::eval()).unwrap();
        let mut t2 = Tape::new();
        let b = m
            .forward(&mut t2, &tokens, Some(&edits), ForwardOpts::eval())
            .unwrap();
        assert_eq!(a.hidden, b.hidden);
        assert_eq!(a.attention, b.attention);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn w_equals_r_edit_is_bit_identical_to_no_edit() {
        let m = MicroTransformer::new(tiny_cfg(), 6).unwrap();
        let tokens = [1u32, 2, 3, 4, 5];
        let mut params = InterventionParams::init(8, 3, &[0, 1], 1, false, 11).unwrap();
        for edit in params.edits.values_mut() {
            edit.w = edit.r_rows.clone();
            edit.b = vec![0.0; 3];
        }
        let positions = [0i64, 2, 4];
        let groups = [0i64, 0, 0];
        let mut edits = EditMap::new();
        for l in 0..2 {
            edits.insert(
                l,
                LayerEditSpec::LowRank {
                    positions: &positions,
                    groups: &groups,
                    params: &params,
                    trainable: false,
                },
            );
        }
        let mut t1 = Tape::new();
        let a = m.forward(&mut t1, &tokens, None, ForwardOpts::eval()).unwrap();
        let mut t2 = Tape::new();
        let b = m
            .forward(&mut t2, &tokens, Some(&edits), ForwardOpts::eval())
            .unwrap();
        assert_eq!(a.hidden, b.hidden);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn taped_edit_matches_reference_apply() {
        let m = MicroTransformer::new(tiny_cfg(), 7).unwrap();
        let tokens = [2u32, 4, 6];
        let params = InterventionParams::init(8, 2, &[0], 1, false, 12).unwrap();
        let positions = [1i64];
        let groups = [0i64];
        let mut edits = EditMap::new();
        edits.insert(
            0,
            LayerEditSpec::LowRank {
                positions: &positions,
                groups: &groups,
                params: &params,
                trainable: false,
            },
        );
        let mut t0 = Tape::new();
        let clean = m.forward(&mut t0, &tokens, None, ForwardOpts::eval()).unwrap();
        let mut t1 = Tape::new();
        let edited = m
            .forward(&mut t1, &tokens, Some(&edits), ForwardOpts::eval())
            .unwrap();
        let d = 8;
        let h = &clean.hidden[1][d..2 * d];
        let expected = params.apply(h, 0, 0).unwrap();
        for c in 0..d {
            assert!((edited.hidden[1][d + c] - expected[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_is_argmax_dominated() {
        // Pin the final layer norm to a constant basis vector so the head
        // emits fixed logits that favor token 7 at every position.
        let mut m = MicroTransformer::new(tiny_cfg(), 8).unwrap();
        let v = m.cfg.vocab_size;
        m.ln_f_gamma = vec![0.0; m.cfg.d_model];
        m.ln_f_beta = vec![0.0; m.cfg.d_model];
        m.ln_f_beta[0] = 1.0;
        m.lm_head = vec![0.0; m.cfg.d_model * v];
        m.lm_head[7] = 50.0;
        let out = m.greedy_decode(&[1, 2, 3], 4, None, None).unwrap();
        assert_eq!(out, vec![7, 7, 7, 7]);
    }

    #[test]
    fn decode_rejects_zero_max_new_and_empty_prompt() {
        let m = MicroTransformer::new(tiny_cfg(), 9).unwrap();
        assert!(m.greedy_decode(&[1], 0, None, None).is_err());
        assert!(m.greedy_decode(&[], 3, None, None).is_err());
    }

    #[test]
    fn digest_is_deterministic_and_sensitive() {
        let m = MicroTransformer::new(tiny_cfg(), 10).unwrap();
        let d1 = m.freeze_digest();
        let d2 = m.freeze_digest();
        assert_eq!(d1, d2);
        let mut m2 = m.clone();
        m2.blocks[0].wq[17] += 1e-6;
        assert_ne!(d1, m2.freeze_digest());
    }
}
