//! Low-rank subspace edits: h + Rᵀ(Wh + b − Rh) with R orthonormal-rowed.
//!
//! One (R, W, b) set is shared by every selected position of a given
//! (layer, group). By default only W and b train; R stays frozen at its
//! random orthonormal initialization, which is what makes the trainable
//! fraction half that of training R as well (see `param_count`).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One low-rank edit: projection R (r x d, orthonormal rows), source W (r x d),
/// bias b (r).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankEdit {
    pub r_rows: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// All edit parameters for a run, keyed by (layer, group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionParams {
    pub d_model: usize,
    pub rank: usize,
    pub train_r: bool,
    pub layers: Vec<usize>,
    pub n_groups: usize,
    pub edits: BTreeMap<(usize, usize), LowRankEdit>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Modified Gram-Schmidt on the rows of an r x d matrix, in place.
/// Errors when a row collapses (numerical rank < r).
pub fn orthonormalize(rows: &mut [f64], r: usize, d: usize) -> Result<()> {
    assert_eq!(rows.len(), r * d);
    if r > d {
        return Err(Error::InvalidConfig(format!("rank {r} exceeds dimension {d}")));
    }
    for i in 0..r {
        for j in 0..i {
            let mut dot = 0.0;
            for c in 0..d {
                dot += rows[i * d + c] * rows[j * d + c];
            }
            for c in 0..d {
                rows[i * d + c] -= dot * rows[j * d + c];
            }
        }
        let norm: f64 = rows[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::RankDeficient(format!("row {i} collapsed during orthonormalization")));
        }
        for c in 0..d {
            rows[i * d + c] /= norm;
        }
    }
    Ok(())
}

/// Max-norm of R Rᵀ − I, the orthonormality defect.
pub fn orthonormality_defect(rows: &[f64], r: usize, d: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..r {
        for j in 0..r {
            let mut dot = 0.0;
            for c in 0..d {
                dot += rows[i * d + c] * rows[j * d + c];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

impl InterventionParams {
    /// Seeded init: R orthonormalized Gaussian, W small Gaussian (std 1e-3),
    /// b zero; one parameter set per (layer, group).
    pub fn init(
        d_model: usize,
        rank: usize,
        layers: &[usize],
        n_groups: usize,
        train_r: bool,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 || rank > d_model {
            return Err(Error::InvalidConfig(format!(
                "rank {rank} must be in [1, {d_model}]"
            )));
        }
        if n_groups == 0 || layers.is_empty() {
            return Err(Error::InvalidConfig("need at least one layer and one group".into()));
        }
        let mut edits = BTreeMap::new();
        for &layer in layers {
            for group in 0..n_groups {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        ^ (group as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
                );
                let mut r_rows = gaussian(&mut rng, rank * d_model, 1.0);
                orthonormalize(&mut r_rows, rank, d_model)?;
                let w = gaussian(&mut rng, rank * d_model, 1e-3);
                let b = vec![0.0; rank];
                edits.insert((layer, group), LowRankEdit { r_rows, w, b });
            }
        }
        Ok(Self {
            d_model,
            rank,
            train_r,
            layers: layers.to_vec(),
            n_groups,
            edits,
        })
    }

    pub fn edit(&self, layer: usize, group: usize) -> Option<&LowRankEdit> {
        self.edits.get(&(layer, group))
    }

    /// Untaped reference application of the edit to one hidden vector.
    pub fn apply(&self, h: &[f64], layer: usize, group: usize) -> Result<Vec<f64>> {
        let edit = self
            .edits
            .get(&(layer, group))
            .ok_or_else(|| Error::IndexOutOfRange(format!("no edit for layer {layer} group {group}")))?;
        if h.len() != self.d_model {
            return Err(Error::ShapeMismatch(format!(
                "apply: h has {} entries, expected {}",
                h.len(),
                self.d_model
            )));
        }
        let (r, d) = (self.rank, self.d_model);
        let mut out = h.to_vec();
        for i in 0..r {
            let mut wh = 0.0;
            let mut rh = 0.0;
            for c in 0..d {
                wh += edit.w[i * d + c] * h[c];
                rh += edit.r_rows[i * d + c] * h[c];
            }
            let coeff = wh + edit.b[i] - rh;
            for c in 0..d {
                out[c] += edit.r_rows[i * d + c] * coeff;
            }
        }
        Ok(out)
    }

    /// Restore orthonormal rows on every R (used after optimizer steps when
    /// R is trainable).
    pub fn reorthonormalize(&mut self) -> Result<()> {
        let (r, d) = (self.rank, self.d_model);
        for edit in self.edits.values_mut() {
            orthonormalize(&mut edit.r_rows, r, d)?;
        }
        Ok(())
    }

    /// Worst orthonormality defect over all (layer, group) edits.
    pub fn max_defect(&self) -> f64 {
        self.edits
            .values()
            .map(|e| orthonormality_defect(&e.r_rows, self.rank, self.d_model))
            .fold(0.0, f64::max)
    }
}

/// Trainable-parameter count for a configuration. W and b always train;
/// R adds another r*d per set when trainable.
pub fn param_count(rank: usize, d_model: usize, n_layers_intervened: usize, n_groups: usize, train_r: bool) -> u64 {
    let per_set = if train_r {
        2 * rank as u64 * d_model as u64 + rank as u64
    } else {
        rank as u64 * d_model as u64 + rank as u64
    };
    n_layers_intervened as u64 * n_groups as u64 * per_set
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_has_orthonormal_rows_and_zero_bias() {
        let p = InterventionParams::init(16, 4, &[0, 1], 1, false, 42).unwrap();
        assert!(p.max_defect() <= 1e-6);
        for edit in p.edits.values() {
            assert!(edit.b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = InterventionParams::init(16, 4, &[0, 1], 2, false, 7).unwrap();
        let b = InterventionParams::init(16, 4, &[0, 1], 2, false, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_rank_above_dim() {
        assert!(InterventionParams::init(4, 5, &[0], 1, false, 1).is_err());
    }

    #[test]
    fn orthonormalize_normalizes_axis_aligned_rows() {
        let mut rows = vec![2.0, 0.0, 0.0, 3.0];
        orthonormalize(&mut rows, 2, 2).unwrap();
        assert_eq!(rows, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn orthonormalize_is_idempotent_up_to_sign() {
        let mut rows = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let before = rows.clone();
        orthonormalize(&mut rows, 2, 3).unwrap();
        for (a, b) in rows.iter().zip(&before) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn orthonormalize_rejects_rank_deficient() {
        let mut rows = vec![1.0, 2.0, 2.0, 4.0]; // row 1 = 2 * row 0
        assert!(matches!(
            orthonormalize(&mut rows, 2, 2),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn orthonormalize_random_matrices_property() {
        use rand_distr::{Distribution, StandardNormal};
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows: Vec<f64> = (0..4 * 16)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            orthonormalize(&mut rows, 4, 16).unwrap();
            assert!(orthonormality_defect(&rows, 4, 16) <= 1e-10);
        }
    }

    #[test]
    fn apply_with_w_equal_r_is_exact_identity() {
        let mut p = InterventionParams::init(8, 3, &[0], 1, false, 3).unwrap();
        {
            let edit = p.edits.get_mut(&(0, 0)).unwrap();
            edit.w = edit.r_rows.clone();
            edit.b = vec![0.0; 3];
        }
        let h: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = p.apply(&h, 0, 0).unwrap();
        assert_eq!(out, h, "Wh and Rh share a code path, difference must be exactly zero");
    }

    #[test]
    fn apply_closed_form_overwrite() {
        let p = InterventionParams {
            d_model: 2,
            rank: 1,
            train_r: false,
            layers: vec![0],
            n_groups: 1,
            edits: BTreeMap::from([(
                (0, 0),
                LowRankEdit {
                    r_rows: vec![1.0, 0.0],
                    w: vec![0.0, 0.0],
                    b: vec![1.0],
                },
            )]),
        };
        let out = p.apply(&[0.3, 0.7], 0, 0).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15);
        assert!((out[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn apply_preserves_orthogonal_complement() {
        // Components of phi(h) orthogonal to R's row space equal those of h.
        let p = InterventionParams::init(16, 4, &[0], 1, false, 11).unwrap();
        let edit = p.edit(0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let h = gaussian(&mut rng, 16, 1.0);
            let out = p.apply(&h, 0, 0).unwrap();
            let diff: Vec<f64> = out.iter().zip(&h).map(|(a, b)| a - b).collect();
            // diff must lie in the row space of R: removing its projection
            // onto R's rows should leave nothing.
            let mut residual = diff.clone();
            for i in 0..4 {
                let mut dot = 0.0;
                for c in 0..16 {
                    dot += residual[c] * edit.r_rows[i * 16 + c];
                }
                for c in 0..16 {
                    residual[c] -= dot * edit.r_rows[i * 16 + c];
                }
            }
            assert!(residual.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn double_apply_with_w_equal_r_still_identity() {
        let mut p = InterventionParams::init(8, 2, &[0], 1, false, 5).unwrap();
        {
            let edit = p.edits.get_mut(&(0, 0)).unwrap();
            edit.w = edit.r_rows.clone();
        }
        let h: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let once = p.apply(&h, 0, 0).unwrap();
        let twice = p.apply(&once, 0, 0).unwrap();
        assert_eq!(twice, h);
    }

    #[test]
    fn param_count_matches_reference_accounting() {
        // 32 layers, rank 8, d 4096, one group.
        assert_eq!(param_count(8, 4096, 32, 1, false), 1_048_832);
        assert_eq!(param_count(8, 4096, 32, 1, true), 2_097_408);
        // Percentages against a 6.738e9-parameter base.
        let pct: f64 = 1_048_832.0 / 6.738e9 * 100.0;
        assert!((pct - 0.0156).abs() < 5e-4);
        let pct_r: f64 = 2_097_408.0 / 6.738e9 * 100.0;
        assert!((pct_r - 0.0311).abs() < 5e-4);
    }

    #[test]
    fn two_groups_double_the_count() {
        assert_eq!(
            param_count(8, 64, 2, 2, false),
            2 * param_count(8, 64, 2, 1, false)
        );
    }
}
