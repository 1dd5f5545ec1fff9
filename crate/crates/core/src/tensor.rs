//! Dense f64 tensors with reverse-mode differentiation on a per-pass tape.
//!
//! The tape records every operation in creation order, so walking node ids in
//! reverse is already a reverse-topological sweep. A tape is built fresh for
//! each forward pass and supports exactly one `backward` call. Post-softmax
//! attention matrices can be force-marked with [`Tape::mark_grad`] so their
//! gradients are captured even when no upstream leaf is trainable.

use crate::error::{Error, Result};

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// One recorded tensor: value plus the operation that produced it.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    op: Op,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// (m, n) + (n,) broadcast over rows.
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    /// base, replacement, row indices (replacement row i goes to rows[i]).
    ReplaceRows(usize, usize, Vec<usize>),
    SoftmaxCausal(usize),
    /// x, gamma, beta; row-wise over the last dimension.
    LayerNorm(usize, usize, usize),
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    /// logits, (row, class) pairs; mean negative log-probability.
    CrossEntropy(usize, Vec<(usize, usize)>),
}

const LN_EPS: f64 = 1e-5;

/// Gradients produced by one backward sweep, keyed by tensor id.
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradMap {
    /// Gradient slice for `id`, or `None` if the tensor does not require grad.
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    #[cfg(test)]
    pub(crate) fn from_raw(grads: Vec<Option<Vec<f64>>>) -> Self {
        Self { grads }
    }
}

/// Recorded operations plus their values, in topological (creation) order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    backward_done: bool,
}

// ── raw matrix kernels ───────────────────────────────────────────────

/// C[m,n] = A[m,k] @ B[k,n], row-major.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[k,m]^T @ B[k,n].
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = arow[i];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] @ B[k,n]^T.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for p in 0..n {
                s += arow[p] * brow[p];
            }
            c[i * k + j] = s;
        }
    }
    c
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Force gradient capture for a tensor that would otherwise be skipped.
    pub fn mark_grad(&mut self, id: TensorId) {
        self.nodes[id.0].requires_grad = true;
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn dims2(&self, id: TensorId) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected 2-d tensor, got {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    // ── construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "leaf shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Scale(a.0, c))
    }

    /// (m, n) matrix plus a length-n bias broadcast over rows.
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a)?;
        if self.nodes[bias.0].shape != [n] {
            return Err(Error::ShapeMismatch(format!(
                "add_row: bias {:?} vs row width {n}",
                self.nodes[bias.0].shape
            )));
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.nodes[bias.0].data[j];
            }
        }
        let rg = self.needs_grad(&[a.0, bias.0]);
        Ok(self.push(vec![m, n], data, rg, Op::AddRow(a.0, bias.0)))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul: ({m},{k}) @ ({k2},{n})"
            )));
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(vec![m, n], data, rg, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a)?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![n, m], data, rg, Op::Transpose(a.0)))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a)?;
        if start + len > n {
            return Err(Error::IndexOutOfRange(format!(
                "slice_cols: [{start}, {}) of width {n}",
                start + len
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![m, len], data, rg, Op::SliceCols(a.0, start, len)))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols with no parts".into()));
        }
        let (m, _) = self.dims2(parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.dims2(p)?;
            if mp != m {
                return Err(Error::ShapeMismatch(format!(
                    "concat_cols: row counts {m} vs {mp}"
                )));
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.nodes[p.0].data;
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let rg = self.needs_grad(&parts.iter().map(|p| p.0).collect::<Vec<_>>());
        Ok(self.push(
            vec![m, n],
            data,
            rg,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        ))
    }

    /// Gather rows of a (rows, d) matrix; also serves as embedding lookup.
    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims2(a)?;
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::IndexOutOfRange(format!(
                    "gather_rows: row {r} of {m}"
                )));
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            vec![rows.len(), n],
            data,
            rg,
            Op::GatherRows(a.0, rows.to_vec()),
        ))
    }

    /// Copy of `base` with `rows[i]` replaced by row i of `replacement`.
    pub fn replace_rows(
        &mut self,
        base: TensorId,
        replacement: TensorId,
        rows: &[usize],
    ) -> Result<TensorId> {
        let (m, n) = self.dims2(base)?;
        let (p, n2) = self.dims2(replacement)?;
        if n != n2 || p != rows.len() {
            return Err(Error::ShapeMismatch(format!(
                "replace_rows: base ({m},{n}), replacement ({p},{n2}), {} rows",
                rows.len()
            )));
        }
        let mut data = self.nodes[base.0].data.clone();
        for (i, &r) in rows.iter().enumerate() {
            if r >= m {
                return Err(Error::IndexOutOfRange(format!(
                    "replace_rows: row {r} of {m}"
                )));
            }
            data[r * n..(r + 1) * n]
                .copy_from_slice(&self.nodes[replacement.0].data[i * n..(i + 1) * n]);
        }
        let rg = self.needs_grad(&[base.0, replacement.0]);
        Ok(self.push(
            vec![m, n],
            data,
            rg,
            Op::ReplaceRows(base.0, replacement.0, rows.to_vec()),
        ))
    }

    // ── nonlinear ───────────────────────────────────────────────────

    /// Row-wise softmax over the causal prefix j <= i; entries above the
    /// diagonal come out exactly 0.
    pub fn softmax_causal(&mut self, scores: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(scores)?;
        if m != n {
            return Err(Error::ShapeMismatch(format!(
                "softmax_causal: non-square ({m},{n})"
            )));
        }
        if n == 0 {
            return Err(Error::EmptyInput("softmax_causal on 0x0".into()));
        }
        let src = &self.nodes[scores.0].data;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let row = &src[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..=i {
                data[i * n + j] /= sum;
            }
        }
        let rg = self.nodes[scores.0].requires_grad;
        Ok(self.push(vec![n, n], data, rg, Op::SoftmaxCausal(scores.0)))
    }

    /// Row-wise layer norm over the last dimension with learned gamma/beta.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x)?;
        if self.nodes[gamma.0].shape != [n] || self.nodes[beta.0].shape != [n] {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm: gamma {:?} beta {:?} vs width {n}",
                self.nodes[gamma.0].shape, self.nodes[beta.0].shape
            )));
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.needs_grad(&[x.0, gamma.0, beta.0]);
        Ok(self.push(vec![m, n], data, rg, Op::LayerNorm(x.0, gamma.0, beta.0)))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Gelu(a.0))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].data.len();
        if n == 0 {
            return Err(Error::EmptyInput("mean of empty tensor".into()));
        }
        let s = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![1], vec![s], rg, Op::Mean(a.0)))
    }

    /// Mean negative log-probability of `targets` = (row, class) pairs under
    /// row-wise softmax of `logits`. Labels may be ground truth or the
    /// argmax of the logits themselves (self-predicted mode).
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[(usize, usize)]) -> Result<TensorId> {
        let (m, v) = self.dims2(logits)?;
        if targets.is_empty() {
            return Err(Error::EmptyInput("cross_entropy with no scored positions".into()));
        }
        for &(row, class) in targets {
            if row >= m {
                return Err(Error::IndexOutOfRange(format!(
                    "cross_entropy: row {row} of {m}"
                )));
            }
            if class >= v {
                return Err(Error::IndexOutOfRange(format!(
                    "cross_entropy: class {class} of vocab {v}"
                )));
            }
        }
        let src = &self.nodes[logits.0].data;
        let mut loss = 0.0;
        for &(row, class) in targets {
            let r = &src[row * v..(row + 1) * v];
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - r[class];
        }
        loss /= targets.len() as f64;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy(logits.0, targets.to_vec()),
        ))
    }

    /// Per-row argmax of a (rows, vocab) logit matrix.
    pub fn argmax_rows(&self, logits: TensorId) -> Result<Vec<usize>> {
        let (m, v) = self.dims2(logits)?;
        let src = &self.nodes[logits.0].data;
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * v..(i + 1) * v];
            let mut best = 0;
            for j in 1..v {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every `requires_grad` tensor ends up
    /// with a gradient (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: TensorId) -> Result<GradMap> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = &self.nodes[loss.0];
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape.clone()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.accumulate_inputs(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }

        // Disconnected-but-tracked tensors get explicit zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(GradMap { grads })
    }

    fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn accumulate_inputs(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |i: usize| self.nodes[i].requires_grad;
        let len = |i: usize| self.nodes[i].data.len();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &t in &[*a, *b] {
                    if rg(t) {
                        Self::acc(grads, t, len(t), |g| {
                            for (gi, &go) in g.iter_mut().zip(gout) {
                                *gi += go;
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    Self::acc(grads, *a, len(*a), |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
                if rg(*b) {
                    Self::acc(grads, *b, len(*b), |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi -= go;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if rg(a) {
                    let bd = &self.nodes[b].data;
                    Self::acc(grads, a, len(a), |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * bd[i];
                        }
                    });
                }
                if rg(b) {
                    let ad = &self.nodes[a].data;
                    Self::acc(grads, b, len(b), |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * ad[i];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if rg(*a) {
                    let c = *c;
                    Self::acc(grads, *a, len(*a), |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go * c;
                        }
                    });
                }
            }
            Op::AddRow(a, bias) => {
                let n = self.nodes[*bias].data.len();
                if rg(*a) {
                    Self::acc(grads, *a, len(*a), |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    });
                }
                if rg(*bias) {
                    Self::acc(grads, *bias, n, |g| {
                        for (i, &go) in gout.iter().enumerate() {
                            g[i % n] += go;
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a].shape[0];
                let k = self.nodes[a].shape[1];
                let n = self.nodes[b].shape[1];
                if rg(a) {
                    let da = matmul_nt(gout, &self.nodes[b].data, m, n, k);
                    Self::acc(grads, a, len(a), |g| {
                        for i in 0..g.len() {
                            g[i] += da[i];
                        }
                    });
                }
                if rg(b) {
                    let db = matmul_tn(&self.nodes[a].data, gout, m, k, n);
                    Self::acc(grads, b, len(b), |g| {
                        for i in 0..g.len() {
                            g[i] += db[i];
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    let m = self.nodes[*a].shape[0];
                    let n = self.nodes[*a].shape[1];
                    Self::acc(grads, *a, len(*a), |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[i * n + j] += gout[j * m + i];
                            }
                        }
                    });
                }
            }
            Op::SliceCols(a, start, width) => {
                if rg(*a) {
                    let n = self.nodes[*a].shape[1];
                    let m = self.nodes[*a].shape[0];
                    let (start, width) = (*start, *width);
                    Self::acc(grads, *a, len(*a), |g| {
                        for i in 0..m {
                            for j in 0..width {
                                g[i * n + start + j] += gout[i * width + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].shape[1]).collect();
                let total: usize = widths.iter().sum();
                let m = self.nodes[id].shape[0];
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if rg(p) {
                        Self::acc(grads, p, len(p), |g| {
                            for i in 0..m {
                                for j in 0..w {
                                    g[i * w + j] += gout[i * total + off + j];
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, rows) => {
                if rg(*a) {
                    let n = self.nodes[*a].shape[1];
                    Self::acc(grads, *a, len(*a), |g| {
                        for (i, &r) in rows.iter().enumerate() {
                            for j in 0..n {
                                g[r * n + j] += gout[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::ReplaceRows(base, repl, rows) => {
                let n = self.nodes[*base].shape[1];
                if rg(*base) {
                    let rowset: Vec<usize> = rows.clone();
                    Self::acc(grads, *base, len(*base), |g| {
                        for (i, &go) in gout.iter().enumerate() {
                            g[i] += go;
                        }
                        for &r in &rowset {
                            for j in 0..n {
                                g[r * n + j] -= gout[r * n + j];
                            }
                        }
                    });
                }
                if rg(*repl) {
                    Self::acc(grads, *repl, len(*repl), |g| {
                        for (i, &r) in rows.iter().enumerate() {
                            for j in 0..n {
                                g[i * n + j] += gout[r * n + j];
                            }
                        }
                    });
                }
            }
            Op::SoftmaxCausal(a) => {
                if rg(*a) {
                    let n = self.nodes[id].shape[0];
                    let y = &self.nodes[id].data;
                    Self::acc(grads, *a, len(*a), |g| {
                        for i in 0..n {
                            let mut dot = 0.0;
                            for j in 0..=i {
                                dot += gout[i * n + j] * y[i * n + j];
                            }
                            for j in 0..=i {
                                g[i * n + j] += y[i * n + j] * (gout[i * n + j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm(x, gamma, beta) => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let m = self.nodes[x].shape[0];
                let n = self.nodes[x].shape[1];
                let xd = &self.nodes[x].data;
                let gd = &self.nodes[gamma].data;
                // Recompute per-row stats; cheaper than caching for desk sizes.
                let mut xhat = vec![0.0; m * n];
                let mut inv = vec![0.0; m];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    inv[i] = 1.0 / (var + LN_EPS).sqrt();
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mean) * inv[i];
                    }
                }
                if rg(x) {
                    Self::acc(grads, x, len(x), |g| {
                        for i in 0..m {
                            let mut sum_dy = 0.0;
                            let mut sum_dy_xhat = 0.0;
                            for j in 0..n {
                                let dy = gout[i * n + j] * gd[j];
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat[i * n + j];
                            }
                            for j in 0..n {
                                let dy = gout[i * n + j] * gd[j];
                                g[i * n + j] += inv[i]
                                    * (dy - sum_dy / n as f64
                                        - xhat[i * n + j] * sum_dy_xhat / n as f64);
                            }
                        }
                    });
                }
                if rg(gamma) {
                    Self::acc(grads, gamma, n, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[j] += gout[i * n + j] * xhat[i * n + j];
                            }
                        }
                    });
                }
                if rg(beta) {
                    Self::acc(grads, beta, n, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[j] += gout[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let xd = &self.nodes[*a].data;
                    Self::acc(grads, *a, len(*a), |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * gelu_grad_scalar(xd[i]);
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    Self::acc(grads, *a, len(*a), |g| {
                        for gi in g.iter_mut() {
                            *gi += gout[0];
                        }
                    });
                }
            }
            Op::Mean(a) => {
                if rg(*a) {
                    let n = len(*a) as f64;
                    Self::acc(grads, *a, len(*a), |g| {
                        for gi in g.iter_mut() {
                            *gi += gout[0] / n;
                        }
                    });
                }
            }
            Op::CrossEntropy(logits, targets) => {
                if rg(*logits) {
                    let v = self.nodes[*logits].shape[1];
                    let src = &self.nodes[*logits].data;
                    let scale = gout[0] / targets.len() as f64;
                    Self::acc(grads, *logits, len(*logits), |g| {
                        for &(row, class) in targets {
                            let r = &src[row * v..(row + 1) * v];
                            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = r.iter().map(|x| (x - max).exp()).sum();
                            for j in 0..v {
                                let p = (r[j] - max).exp() / sum;
                                let indicator = if j == class { 1.0 } else { 0.0 };
                                g[row * v + j] += scale * (p - indicator);
                            }
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn softmax_causal_symmetry_row() {
        let mut t = Tape::new();
        let s = t.constant(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let a = t.softmax_causal(s).unwrap();
        // row 0: single unmasked entry; row 1: two equal entries.
        assert_eq!(t.data(a)[0], 1.0);
        assert_eq!(t.data(a)[1], 0.0);
        assert_eq!(t.data(a)[2], 0.5);
        assert_eq!(t.data(a)[3], 0.5);
    }

    #[test]
    fn softmax_causal_closed_form() {
        let mut t = Tape::new();
        let s = t
            .constant(&[2, 2], vec![0.0, 0.0, 2.0f64.ln(), 0.0])
            .unwrap();
        let a = t.softmax_causal(s).unwrap();
        assert!((t.data(a)[2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.data(a)[3] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_causal_rejects_non_square_and_empty() {
        let mut t = Tape::new();
        let s = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(t.softmax_causal(s).is_err());
        let e = t.constant(&[0, 0], vec![]).unwrap();
        assert!(t.softmax_causal(e).is_err());
    }

    #[test]
    fn softmax_rows_stochastic_over_prefix() {
        let mut t = Tape::new();
        let n = 7;
        let vals: Vec<f64> = (0..n * n).map(|i| ((i * 37 % 11) as f64) * 0.3 - 1.0).collect();
        let s = t.constant(&[n, n], vals).unwrap();
        let a = t.softmax_causal(s).unwrap();
        for i in 0..n {
            let row_sum: f64 = (0..=i).map(|j| t.data(a)[i * n + j]).sum();
            assert!((row_sum - 1.0).abs() <= 1e-12);
            for j in i + 1..n {
                assert_eq!(t.data(a)[i * n + j], 0.0);
            }
        }
    }

    #[test]
    fn cross_entropy_certainty_is_zero() {
        let mut t = Tape::new();
        // Huge margin on class 0 -> prob ~1 -> loss ~0.
        let l = t
            .constant(&[1, 4], vec![200.0, 0.0, 0.0, 0.0])
            .unwrap();
        let loss = t.cross_entropy(l, &[(0, 0)]).unwrap();
        assert!(t.data(loss)[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let mut t = Tape::new();
        let l = t.constant(&[1, 4], vec![0.0; 4]).unwrap();
        let loss = t.cross_entropy(l, &[(0, 2)]).unwrap();
        assert!((t.data(loss)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_per_position_enumeration() {
        // Independent oracle: per-position -log p summed by hand.
        let mut t = Tape::new();
        let vals = vec![
            0.3, -1.2, 0.7, 2.0, -0.5, //
            1.1, 0.0, -0.3, 0.4, 0.9, //
            -2.0, 0.6, 0.2, -0.1, 1.5,
        ];
        let l = t.constant(&[3, 5], vals.clone()).unwrap();
        let targets = [(0, 3), (1, 0), (2, 4)];
        let loss = t.cross_entropy(l, &targets).unwrap();

        let mut expected = 0.0;
        for &(row, class) in &targets {
            let r = &vals[row * 5..(row + 1) * 5];
            let denom: f64 = r.iter().map(|x| x.exp()).sum();
            expected += -(r[class].exp() / denom).ln();
        }
        expected /= targets.len() as f64;
        assert!(rel_err(t.data(loss)[0], expected) < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label_and_empty() {
        let mut t = Tape::new();
        let l = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(t.cross_entropy(l, &[(0, 3)]).is_err());
        assert!(t.cross_entropy(l, &[]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0], true).unwrap();
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn disconnected_tensor_gets_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let unused = t.leaf(&[3], vec![5.0, 6.0, 7.0], true).unwrap();
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut t = Tape::new();
        let x = t.leaf(&[1], vec![2.0], true).unwrap();
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        let x2 = TensorId(loss.0);
        assert!(matches!(t.backward(x2), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn softmax_row_gradients_sum_to_zero() {
        let mut t = Tape::new();
        let n = 5;
        let vals: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.17).sin()).collect();
        let s = t.leaf(&[n, n], vals, true).unwrap();
        let a = t.softmax_causal(s).unwrap();
        let w = t.constant(&[n, n], (0..n * n).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let aw = t.mul(a, w).unwrap();
        let loss = t.sum(aw);
        let g = t.backward(loss).unwrap();
        let gs = g.get(s).unwrap();
        for i in 0..n {
            let row_sum: f64 = (0..=i).map(|j| gs[i * n + j]).sum();
            assert!(row_sum.abs() < 1e-12, "row {i} grad sum {row_sum}");
        }
    }

    /// Central finite differences on a small composed graph.
    #[test]
    fn finite_difference_check_composed_graph() {
        let build = |xs: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(&[3, 3], xs.to_vec(), true).unwrap();
            let g = t.constant(&[3], vec![1.1, 0.9, 1.0]).unwrap();
            let b = t.constant(&[3], vec![0.0, 0.1, -0.1]).unwrap();
            let ln = t.layer_norm(x, g, b).unwrap();
            let ge = t.gelu(ln);
            let sm = t.softmax_causal(ge).unwrap();
            let w = t
                .constant(&[3, 3], vec![0.2, -0.4, 0.6, 0.1, 0.3, -0.2, 0.5, 0.0, 0.7])
                .unwrap();
            let mm = t.matmul(sm, w).unwrap();
            let loss = t.cross_entropy(mm, &[(0, 1), (2, 0)]).unwrap();
            t.data(loss)[0]
        };

        let xs: Vec<f64> = (0..9).map(|i| (i as f64 * 0.31).sin() * 0.8).collect();

        let mut t = Tape::new();
        let x = t.leaf(&[3, 3], xs.clone(), true).unwrap();
        let g = t.constant(&[3], vec![1.1, 0.9, 1.0]).unwrap();
        let b = t.constant(&[3], vec![0.0, 0.1, -0.1]).unwrap();
        let ln = t.layer_norm(x, g, b).unwrap();
        let ge = t.gelu(ln);
        let sm = t.softmax_causal(ge).unwrap();
        let w = t
            .constant(&[3, 3], vec![0.2, -0.4, 0.6, 0.1, 0.3, -0.2, 0.5, 0.0, 0.7])
            .unwrap();
        let mm = t.matmul(sm, w).unwrap();
        let loss = t.cross_entropy(mm, &[(0, 1), (2, 0)]).unwrap();
        let grads = t.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();

        let h = 1e-5;
        for i in 0..9 {
            let mut plus = xs.clone();
            plus[i] += h;
            let mut minus = xs.clone();
            minus[i] -= h;
            let fd = (build(&plus) - build(&minus)) / (2.0 * h);
            assert!(
                rel_err(gx[i], fd) < 1e-3,
                "element {i}: analytic {} vs fd {fd}",
                gx[i]
            );
        }
    }

    #[test]
    fn replace_and_gather_rows_roundtrip_gradients() {
        let mut t = Tape::new();
        let base = t.leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true).unwrap();
        let repl = t.leaf(&[1, 2], vec![10.0, 20.0], true).unwrap();
        let out = t.replace_rows(base, repl, &[1]).unwrap();
        assert_eq!(t.data(out), &[1.0, 2.0, 10.0, 20.0, 5.0, 6.0]);
        let loss = t.sum(out);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(base).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.get(repl).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn no_nan_inf_after_ops_on_finite_inputs() {
        let mut t = Tape::new();
        let big = t.constant(&[2, 2], vec![700.0, -700.0, 300.0, 0.0]).unwrap();
        let a = t.softmax_causal(big).unwrap();
        assert!(t.data(a).iter().all(|v| v.is_finite()));
        let ce = t.cross_entropy(big, &[(0, 0), (1, 1)]).unwrap();
        assert!(t.data(ce)[0].is_finite());
    }
}
