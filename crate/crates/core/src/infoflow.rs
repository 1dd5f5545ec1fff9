//! Information-flow grids and critical-representation identification.
//!
//! A grid is one layer's causal position-by-position interaction matrix,
//! valued either by head-averaged attention or by magnitude-of
//! attention-times-gradient saliency (row-normalized). Filtering keeps
//! positions whose diagonal (self-referential) or column mean
//! (multi-referential) clears a threshold; the union strategy merges both.
//! Selection trims candidates to a fixed width per layer, padding with -1.
//!
//! Grid indexing: intervening at layer `l` edits the output of block `l`.
//! Self-referential filtering reads the attention inside block `l` (the block
//! that produces the edited stream). Multi-referential filtering reads the
//! attention inside block `l+1` (the block that consumes it), clamped at the
//! last block; `align_grid_indices` collapses both to block `l`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EditMap, ForwardOpts, ForwardTrace, LayerEditSpec, MicroTransformer};
use crate::tensor::{GradMap, Tape};

// ── configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Saf,
    Ssf,
    Maf,
    Msf,
    UnionAttn,
    UnionSal,
    Fixed,
    Random,
}

impl Strategy {
    pub fn needs_saliency(self) -> bool {
        matches!(self, Strategy::Ssf | Strategy::Msf | Strategy::UnionSal)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "saf" => Ok(Strategy::Saf),
            "ssf" => Ok(Strategy::Ssf),
            "maf" => Ok(Strategy::Maf),
            "msf" => Ok(Strategy::Msf),
            "union-attn" | "union_attn" | "unionattn" => Ok(Strategy::UnionAttn),
            "union-sal" | "union_sal" | "unionsal" => Ok(Strategy::UnionSal),
            "fixed" => Ok(Strategy::Fixed),
            "random" => Ok(Strategy::Random),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criteria {
    Order,
    Score,
    Random,
}

impl std::str::FromStr for Criteria {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "order" => Ok(Criteria::Order),
            "score" => Ok(Criteria::Score),
            "random" => Ok(Criteria::Random),
            other => Err(Error::InvalidConfig(format!("unknown criteria {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMode {
    /// Intersect each layer's candidates with the previous layer's selection.
    Inherit,
    /// Filter each layer independently.
    Fresh,
}

impl std::str::FromStr for ChainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inherit" => Ok(ChainMode::Inherit),
            "fresh" => Ok(ChainMode::Fresh),
            other => Err(Error::InvalidConfig(format!("unknown chain mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrftConfig {
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    pub k_int: usize,
    pub criteria: Criteria,
    pub chain_mode: ChainMode,
    /// Inclusive intervened-layer interval; None means the full stack.
    pub layer_lo: Option<usize>,
    pub layer_hi: Option<usize>,
    pub rank: usize,
    pub train_r: bool,
    pub segment_grouping: bool,
    pub fixed_prefix: usize,
    pub fixed_suffix: usize,
    pub align_grid_indices: bool,
    pub seed: u64,
}

impl Default for CrftConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Saf,
            alpha: 0.05,
            beta: 0.05,
            k_int: 14,
            criteria: Criteria::Order,
            chain_mode: ChainMode::Inherit,
            layer_lo: None,
            layer_hi: None,
            rank: 8,
            train_r: false,
            segment_grouping: false,
            fixed_prefix: 7,
            fixed_suffix: 7,
            align_grid_indices: false,
            seed: 42,
        }
    }
}

impl CrftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig("alpha and beta must lie in [0, 1]".into()));
        }
        if self.k_int == 0 {
            return Err(Error::InvalidConfig("k_int must be >= 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be >= 1".into()));
        }
        if let (Some(lo), Some(hi)) = (self.layer_lo, self.layer_hi) {
            if lo > hi {
                return Err(Error::InvalidConfig(format!("layer range {lo}:{hi} is inverted")));
            }
        }
        Ok(())
    }

    /// Concrete intervened layers for a model with `n_layers` blocks.
    pub fn layers_for(&self, n_layers: usize) -> Result<Vec<usize>> {
        let lo = self.layer_lo.unwrap_or(0);
        let hi = self.layer_hi.unwrap_or(n_layers.saturating_sub(1));
        if lo > hi || hi >= n_layers {
            return Err(Error::InvalidConfig(format!(
                "layer range {lo}:{hi} outside [0, {})",
                n_layers
            )));
        }
        Ok((lo..=hi).collect())
    }

    pub fn n_groups(&self) -> usize {
        if self.segment_grouping {
            2
        } else {
            1
        }
    }
}

// ── segments ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Demonstration,
    Question,
    Answer,
}

/// Per-position segment tags for one example (prompt followed by target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub tags: Vec<Segment>,
}

impl SegmentMap {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Parameter group for a position: demonstrations get their own update
    /// vector, question and answer positions share the other.
    pub fn group_of(&self, pos: usize) -> usize {
        match self.tags[pos] {
            Segment::Demonstration => 0,
            Segment::Question | Segment::Answer => 1,
        }
    }

    pub fn prefix(&self, n: usize) -> SegmentMap {
        SegmentMap {
            tags: self.tags[..n.min(self.tags.len())].to_vec(),
        }
    }
}

// ── grids ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Attention,
    Saliency,
}

/// One layer's causal information-interaction matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoGrid {
    pub layer: usize,
    pub n: usize,
    pub values: Vec<f64>,
    pub kind: GridKind,
}

impl InfoGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Head-averaged post-softmax attention for one layer.
pub fn attention_grid(trace: &ForwardTrace, layer: usize) -> Result<InfoGrid> {
    let heads = trace
        .attention
        .get(layer)
        .ok_or_else(|| Error::IndexOutOfRange(format!("attention layer {layer}")))?;
    let n = trace.n_tokens;
    let mut values = vec![0.0; n * n];
    for head in heads {
        for (v, a) in values.iter_mut().zip(head.iter()) {
            *v += a;
        }
    }
    let h = heads.len() as f64;
    for v in &mut values {
        *v /= h;
    }
    Ok(InfoGrid {
        layer,
        n,
        values,
        kind: GridKind::Attention,
    })
}

/// Saliency grid: per head |A * dL/dA|, head-averaged, then each causal row
/// normalized to sum 1. Rows with no signal stay zero; a grid with no signal
/// at all is degenerate.
pub fn saliency_grid(trace: &ForwardTrace, layer: usize, grads: &GradMap) -> Result<InfoGrid> {
    let heads = trace
        .attention
        .get(layer)
        .ok_or_else(|| Error::IndexOutOfRange(format!("attention layer {layer}")))?;
    let ids = &trace.attn_ids[layer];
    let n = trace.n_tokens;
    let mut values = vec![0.0; n * n];
    for (head, &id) in heads.iter().zip(ids.iter()) {
        let g = grads
            .get(id)
            .ok_or_else(|| Error::DegenerateGrid(format!("no gradient for layer {layer} attention")))?;
        for (v, (a, gi)) in values.iter_mut().zip(head.iter().zip(g.iter())) {
            *v += (a * gi).abs();
        }
    }
    let h = heads.len() as f64;
    for v in &mut values {
        *v /= h;
    }
    if values.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateGrid(format!(
            "loss carries no signal through layer {layer} attention"
        )));
    }
    for i in 0..n {
        let sum: f64 = (0..=i).map(|j| values[i * n + j]).sum();
        if sum > 0.0 {
            for j in 0..=i {
                values[i * n + j] /= sum;
            }
        }
    }
    Ok(InfoGrid {
        layer,
        n,
        values,
        kind: GridKind::Saliency,
    })
}

// ── filters ──────────────────────────────────────────────────────────

/// Positions whose diagonal cell clears `alpha` (inclusive, so the forced-1.0
/// diagonal of row 0 still qualifies at alpha = 1.0), with their scores.
pub fn self_referential_filter(grid: &InfoGrid, alpha: f64) -> Vec<(usize, f64)> {
    (0..grid.n)
        .filter_map(|i| {
            let s = grid.at(i, i);
            (s >= alpha).then_some((i, s))
        })
        .collect()
}

/// Positions whose column mean over rows i >= j clears `beta`.
pub fn multi_referential_filter(grid: &InfoGrid, beta: f64) -> Vec<(usize, f64)> {
    (0..grid.n)
        .filter_map(|j| {
            let mut sum = 0.0;
            for i in j..grid.n {
                sum += grid.at(i, j);
            }
            let score = sum / (grid.n - j) as f64;
            (score >= beta).then_some((j, score))
        })
        .collect()
}

/// Set union; scores from different filters are not comparable, so a shared
/// position just keeps the larger one for tie-breaking.
pub fn union_filter(a: &[(usize, f64)], b: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut merged: std::collections::BTreeMap<usize, f64> = a.iter().cloned().collect();
    for &(p, s) in b {
        merged
            .entry(p)
            .and_modify(|v| *v = v.max(s))
            .or_insert(s);
    }
    merged.into_iter().collect()
}

/// Keep only candidates that were selected (non-sentinel) in the previous
/// layer.
pub fn chain_inherit(prev_selected: &[i64], candidates: &[(usize, f64)]) -> Vec<(usize, f64)> {
    candidates
        .iter()
        .filter(|(p, _)| prev_selected.contains(&(*p as i64)))
        .cloned()
        .collect()
}

/// Trim candidates to a fixed-width list, padding with -1.
pub fn select_positions(
    candidates: &[(usize, f64)],
    k_int: usize,
    criteria: Criteria,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<i64>> {
    if k_int == 0 {
        return Err(Error::InvalidConfig("k_int must be >= 1".into()));
    }
    let mut picked: Vec<usize> = match criteria {
        Criteria::Order => {
            let mut ps: Vec<usize> = candidates.iter().map(|&(p, _)| p).collect();
            ps.sort_unstable();
            ps.truncate(k_int);
            ps
        }
        Criteria::Score => {
            let mut cs = candidates.to_vec();
            cs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            cs.truncate(k_int);
            cs.into_iter().map(|(p, _)| p).collect()
        }
        Criteria::Random => {
            let mut ps: Vec<usize> = candidates.iter().map(|&(p, _)| p).collect();
            ps.sort_unstable();
            ps.shuffle(rng);
            ps.truncate(k_int);
            ps
        }
    };
    picked.sort_unstable();
    let mut out: Vec<i64> = picked.into_iter().map(|p| p as i64).collect();
    out.resize(k_int, -1);
    Ok(out)
}

// ── identification ───────────────────────────────────────────────────

/// Fixed-width intervention positions per layer, with parameter-group tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalSet {
    pub k_int: usize,
    pub layers: Vec<usize>,
    pub positions: Vec<Vec<i64>>,
    pub groups: Vec<Vec<i64>>,
}

impl CriticalSet {
    /// Build the forward-pass edit map that applies `params` at these
    /// positions.
    pub fn edit_map<'a>(
        &'a self,
        params: &'a crate::intervention::InterventionParams,
        trainable: bool,
    ) -> EditMap<'a> {
        let mut map = EditMap::new();
        for (i, &layer) in self.layers.iter().enumerate() {
            map.insert(
                layer,
                LayerEditSpec::LowRank {
                    positions: &self.positions[i],
                    groups: &self.groups[i],
                    params,
                    trainable,
                },
            );
        }
        map
    }

    /// Drop positions at or beyond `limit` (used to restrict a training-time
    /// set to prompt positions).
    pub fn clamp_to(&self, limit: usize) -> CriticalSet {
        let mut out = self.clone();
        for (ps, gs) in out.positions.iter_mut().zip(out.groups.iter_mut()) {
            for (p, g) in ps.iter_mut().zip(gs.iter_mut()) {
                if *p >= limit as i64 {
                    *p = -1;
                    *g = -1;
                }
            }
        }
        out
    }
}

fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = seed;
    for (i, &t) in tags.iter().enumerate() {
        s = s
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(t)
            .rotate_left(17 + (i as u32 % 13));
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// Forward (and backward, when saliency is needed) on the frozen base.
pub struct IdentPass {
    pub trace: ForwardTrace,
    pub grads: Option<GradMap>,
}

/// Run the identification pass. With `labels` (teacher-forced training) the
/// saliency loss scores those pairs; without, every position is scored
/// against the model's own argmax prediction.
pub fn identification_pass(
    model: &MicroTransformer,
    tokens: &[u32],
    needs_saliency: bool,
    labels: Option<&[(usize, usize)]>,
) -> Result<IdentPass> {
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, tokens, None, ForwardOpts::eval())?;
    let grads = if needs_saliency {
        let pairs: Vec<(usize, usize)> = match labels {
            Some(p) => p.to_vec(),
            None => {
                let preds = tape.argmax_rows(trace.logits_id)?;
                preds.into_iter().enumerate().collect()
            }
        };
        let loss = tape.cross_entropy(trace.logits_id, &pairs)?;
        Some(tape.backward(loss)?)
    } else {
        None
    };
    Ok(IdentPass { trace, grads })
}

fn grid_for(
    trace: &ForwardTrace,
    grads: Option<&GradMap>,
    layer: usize,
    n_layers: usize,
    multi: bool,
    saliency: bool,
    align: bool,
) -> Result<InfoGrid> {
    let idx = if multi && !align {
        (layer + 1).min(n_layers - 1)
    } else {
        layer
    };
    if saliency {
        let g = grads.ok_or_else(|| Error::DegenerateGrid("saliency grid requested without gradients".into()))?;
        saliency_grid(trace, idx, g)
    } else {
        attention_grid(trace, idx)
    }
}

/// Candidate positions with scores for one layer under a strategy.
pub fn layer_candidates(
    trace: &ForwardTrace,
    grads: Option<&GradMap>,
    cfg: &CrftConfig,
    layer: usize,
    n_layers: usize,
) -> Result<Vec<(usize, f64)>> {
    let g = |multi: bool, sal: bool| {
        grid_for(trace, grads, layer, n_layers, multi, sal, cfg.align_grid_indices)
    };
    Ok(match cfg.strategy {
        Strategy::Saf => self_referential_filter(&g(false, false)?, cfg.alpha),
        Strategy::Ssf => self_referential_filter(&g(false, true)?, cfg.alpha),
        Strategy::Maf => multi_referential_filter(&g(true, false)?, cfg.beta),
        Strategy::Msf => multi_referential_filter(&g(true, true)?, cfg.beta),
        Strategy::UnionAttn => union_filter(
            &self_referential_filter(&g(false, false)?, cfg.alpha),
            &multi_referential_filter(&g(true, false)?, cfg.beta),
        ),
        Strategy::UnionSal => union_filter(
            &self_referential_filter(&g(false, true)?, cfg.alpha),
            &multi_referential_filter(&g(true, true)?, cfg.beta),
        ),
        Strategy::Fixed | Strategy::Random => {
            return Err(Error::InvalidConfig(
                "fixed/random strategies have no scored candidates".into(),
            ))
        }
    })
}

/// Per-position strategy score over all positions (no threshold), used for
/// ranking in the noise-asymmetry experiment.
pub fn layer_scores(
    trace: &ForwardTrace,
    grads: Option<&GradMap>,
    cfg: &CrftConfig,
    layer: usize,
    n_layers: usize,
) -> Result<Vec<f64>> {
    let g = |multi: bool, sal: bool| {
        grid_for(trace, grads, layer, n_layers, multi, sal, cfg.align_grid_indices)
    };
    let diag = |grid: &InfoGrid| (0..grid.n).map(|i| grid.at(i, i)).collect::<Vec<f64>>();
    let colmean = |grid: &InfoGrid| {
        (0..grid.n)
            .map(|j| {
                let mut sum = 0.0;
                for i in j..grid.n {
                    sum += grid.at(i, j);
                }
                sum / (grid.n - j) as f64
            })
            .collect::<Vec<f64>>()
    };
    Ok(match cfg.strategy {
        Strategy::Saf => diag(&g(false, false)?),
        Strategy::Ssf => diag(&g(false, true)?),
        Strategy::Maf => colmean(&g(true, false)?),
        Strategy::Msf => colmean(&g(true, true)?),
        Strategy::UnionAttn => {
            let a = diag(&g(false, false)?);
            let b = colmean(&g(true, false)?);
            a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect()
        }
        Strategy::UnionSal => {
            let a = diag(&g(false, true)?);
            let b = colmean(&g(true, true)?);
            a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect()
        }
        Strategy::Fixed | Strategy::Random => {
            return Err(Error::InvalidConfig(
                "fixed/random strategies do not score positions".into(),
            ))
        }
    })
}

/// Identify critical representations for one example.
///
/// `tokens` is the prompt alone at inference (k = 0) or prompt plus target
/// under teacher forcing; `labels` supplies ground-truth (position, token)
/// pairs for the saliency loss during training. Identification always runs
/// on the frozen base with no interventions active.
pub fn identify(
    model: &MicroTransformer,
    tokens: &[u32],
    segments: &SegmentMap,
    cfg: &CrftConfig,
    labels: Option<&[(usize, usize)]>,
) -> Result<CriticalSet> {
    cfg.validate()?;
    let n_layers = model.cfg.n_layers;
    let layers = cfg.layers_for(n_layers)?;
    let n_valid = tokens.len();
    if segments.len() < n_valid {
        return Err(Error::InvalidConfig(format!(
            "segment map covers {} of {} positions",
            segments.len(),
            n_valid
        )));
    }

    // Fixed and random position lists need no trace at all.
    let pass = if matches!(cfg.strategy, Strategy::Fixed | Strategy::Random) {
        None
    } else {
        Some(identification_pass(
            model,
            tokens,
            cfg.strategy.needs_saliency(),
            labels,
        )?)
    };

    let mut positions = Vec::with_capacity(layers.len());
    let mut groups = Vec::with_capacity(layers.len());
    let mut prev: Option<Vec<i64>> = None;
    for &layer in &layers {
        let selected = match cfg.strategy {
            Strategy::Fixed => {
                let mut ps: Vec<usize> = (0..cfg.fixed_prefix.min(n_valid)).collect();
                for p in n_valid.saturating_sub(cfg.fixed_suffix)..n_valid {
                    if !ps.contains(&p) {
                        ps.push(p);
                    }
                }
                let cands: Vec<(usize, f64)> = ps.into_iter().map(|p| (p, 0.0)).collect();
                let mut rng = derive_rng(cfg.seed, &[layer as u64, 0xF1]);
                select_positions(&cands, cfg.k_int, Criteria::Order, &mut rng)?
            }
            Strategy::Random => {
                let mut rng = derive_rng(cfg.seed, &[layer as u64, n_valid as u64]);
                let mut all: Vec<usize> = (0..n_valid).collect();
                all.shuffle(&mut rng);
                all.truncate(cfg.k_int);
                all.sort_unstable();
                let mut out: Vec<i64> = all.into_iter().map(|p| p as i64).collect();
                out.resize(cfg.k_int, -1);
                out
            }
            _ => {
                let pass = pass.as_ref().expect("trace exists for filtered strategies");
                let mut cands =
                    layer_candidates(&pass.trace, pass.grads.as_ref(), cfg, layer, n_layers)?;
                if cfg.chain_mode == ChainMode::Inherit {
                    if let Some(prev) = &prev {
                        cands = chain_inherit(prev, &cands);
                    }
                }
                let mut rng = derive_rng(cfg.seed, &[layer as u64, 0x5E]);
                select_positions(&cands, cfg.k_int, cfg.criteria, &mut rng)?
            }
        };
        let tags: Vec<i64> = selected
            .iter()
            .map(|&p| {
                if p < 0 {
                    -1
                } else if cfg.segment_grouping {
                    segments.group_of(p as usize) as i64
                } else {
                    0
                }
            })
            .collect();
        prev = Some(selected.clone());
        positions.push(selected);
        groups.push(tags);
    }
    Ok(CriticalSet {
        k_int: cfg.k_int,
        layers,
        positions,
        groups,
    })
}

// ── perturbation oracle ──────────────────────────────────────────────

/// Empirical criticality (Eq.-style flip rate): Gaussian noise of std
/// `epsilon` is injected into one (layer, position) representation at a time
/// and the fraction of trials that flip answer correctness is reported.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_oracle(
    model: &MicroTransformer,
    prompt: &[u32],
    judge: &dyn Fn(&[u32]) -> bool,
    max_new: usize,
    stop_token: Option<u32>,
    layers: &[usize],
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidConfig("epsilon must be >= 0".into()));
    }
    let baseline = judge(&model.greedy_decode(prompt, max_new, None, stop_token)?);
    let d = model.cfg.d_model;
    let n = prompt.len();
    let mut rates = Vec::with_capacity(layers.len());
    for &layer in layers {
        let mut layer_rates = Vec::with_capacity(n);
        for pos in 0..n {
            let mut flips = 0usize;
            for trial in 0..trials {
                let mut rng = derive_rng(seed, &[layer as u64, pos as u64, trial as u64]);
                let noise: Vec<f64> = (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * epsilon
                    })
                    .collect();
                let positions = [pos];
                let vectors = [noise];
                let mut edits = EditMap::new();
                edits.insert(
                    layer,
                    LayerEditSpec::AddVectors {
                        positions: &positions,
                        vectors: &vectors,
                    },
                );
                let out = model.greedy_decode(prompt, max_new, Some(&edits), stop_token)?;
                if judge(&out) != baseline {
                    flips += 1;
                }
            }
            layer_rates.push(flips as f64 / trials as f64);
        }
        rates.push(layer_rates);
    }
    Ok(rates)
}
