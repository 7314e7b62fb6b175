//! Define-by-run reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation appends a node to the [`Tape`]; node indices are therefore
//! a topological order and [`Tape::backward`] visits them once, in reverse.
//! A tape created with [`Tape::no_grad`] evaluates the same operations but
//! keeps no backward state.

use super::linalg::{self, SvdConfig, SvdMap};
use super::{gemm_acc, Matrix, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Scale(Var, T),
    SliceRows { x: Var, start: usize },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Rope { x: Var, n_heads: usize, offset: usize },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, probs: Vec<T> },
    Gelu(Var),
    Embedding { table: Var, tokens: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Matrix<T>, count: usize },
    SvdMap { m: Var, rank: usize, map: SvdMap },
    Frobenius(Var),
    WeightedSum { x: Var, weights: Matrix<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

/// Gradients of a scalar with respect to the tape's parameter leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, or `None` when it does not influence the output.
    pub fn get(&self, var: Var) -> Option<&Matrix<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;
const ROPE_BASE: f64 = 10_000.0;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; `backward` on it yields no gradients.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        let needs_grad = self.recording;
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `x` cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.recording && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.product(a, false, b, false)
    }

    /// `x·wᵀ`, the row-vector convention of a linear layer with weight `w`
    /// of shape d_out×d_in.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.product(x, false, w, true)
    }

    /// `op(a)·op(b)` with optional transposes.
    pub fn product(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = Matrix::product(self.value(a), ta, self.value(b), tb)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), g)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        if start > end || end > rows {
            return Err(Error::dim("slice_rows", (rows, 0), (start, end)));
        }
        let value = self.value(x).slice_rows(start..end);
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, g))
    }

    /// `A2·Hᵀ·H·B1`.
    pub fn projected_gram(&mut self, h: Var, a2: Var, b1: Var) -> Result<Var> {
        let left = self.product(h, false, a2, true)?;
        let right = self.matmul(h, b1)?;
        self.product(left, true, right, false)
    }

    /// Row-wise RMS normalization with a learned 1×d gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let d = xv.cols();
        if gv.shape() != (1, d) {
            return Err(Error::dim("rms_norm", (1, d), gv.shape()));
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d.max(1)).unwrap();
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = out.row_mut(i);
            let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / dn;
            let inv = T::one() / (ms + eps).sqrt();
            for (v, &g) in row.iter_mut().zip(gv.as_slice()) {
                *v = *v * inv * g;
            }
            inv_rms.push(inv);
        }
        let g = self.any_grad(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, g))
    }

    /// Rotary position embedding over `n_heads` interleaved-pair heads;
    /// row `i` sits at position `offset + i`.
    pub fn rope(&mut self, x: Var, n_heads: usize, offset: usize) -> Result<Var> {
        let mut out = self.value(x).clone();
        let d = out.cols();
        if n_heads == 0 || !d.is_multiple_of(n_heads) || !(d / n_heads).is_multiple_of(2) {
            return Err(Error::dim("rope", (d, n_heads), (d / n_heads.max(1), 2)));
        }
        rotate(&mut out, n_heads, offset, false);
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Rope { x, n_heads, offset }, g))
    }

    /// Multi-head causal softmax attention; inputs are M×d with heads laid
    /// out as contiguous column blocks.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::dim("causal_attention", qv.shape(), kv.shape()));
        }
        let (m, d) = qv.shape();
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::dim("causal_attention heads", (m, d), (n_heads, 0)));
        }
        let hd = d / n_heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let mut probs = vec![T::zero(); n_heads * m * m];
        let mut out = Matrix::<T>::zeros(m, d);
        for h in 0..n_heads {
            let p = &mut probs[h * m * m..(h + 1) * m * m];
            // scores = scale · Q_h K_hᵀ
            unsafe {
                T::gemm(
                    m, hd, m, scale,
                    qv.as_slice().as_ptr().add(h * hd), d as isize, 1,
                    kv.as_slice().as_ptr().add(h * hd), 1, d as isize,
                    T::zero(), p.as_mut_ptr(), m as isize, 1,
                );
            }
            for i in 0..m {
                let row = &mut p[i * m..(i + 1) * m];
                let mx = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for e in row[..=i].iter_mut() {
                    *e = (*e - mx).exp();
                    sum += *e;
                }
                for e in row[..=i].iter_mut() {
                    *e /= sum;
                }
                row[i + 1..].iter_mut().for_each(|e| *e = T::zero());
            }
            // O_h = P V_h
            unsafe {
                T::gemm(
                    m, m, hd, T::one(),
                    p.as_ptr(), m as isize, 1,
                    vv.as_slice().as_ptr().add(h * hd), d as isize, 1,
                    T::zero(), out.as_mut_slice().as_mut_ptr().add(h * hd), d as isize, 1,
                );
            }
        }
        let g = self.any_grad(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, n_heads, probs }, g))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let data = xv.as_slice().iter().map(|&v| gelu(v)).collect();
            Matrix::from_vec(xv.rows(), xv.cols(), data).unwrap_or_else(|_| Matrix::zeros(xv.rows(), xv.cols()))
        };
        let g = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), g)
    }

    /// Rows of `table` selected by `tokens`.
    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Matrix::zeros(tokens.len(), tv.cols());
        for (i, &t) in tokens.iter().enumerate() {
            if t >= tv.rows() {
                return Err(Error::Data(format!("token id {t} outside vocabulary of {}", tv.rows())));
            }
            out.row_mut(i).copy_from_slice(tv.row(t));
        }
        let g = self.any_grad(&[table]);
        Ok(self.push(out, Op::Embedding { table, tokens: tokens.to_vec() }, g))
    }

    /// Mean next-token negative log-likelihood over the masked rows (1×1).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, vocab) = lv.shape();
        if targets.len() != m || mask.len() != m {
            return Err(Error::dim("cross_entropy", (m, vocab), (targets.len(), mask.len())));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::DegenerateTarget);
        }
        let mut probs = Matrix::zeros(m, vocab);
        let mut total = 0.0f64;
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= vocab {
                return Err(Error::Data(format!("target id {t} outside vocabulary of {vocab}")));
            }
            let row = lv.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            let prow = probs.row_mut(i);
            for (p, &z) in prow.iter_mut().zip(row) {
                *p = (z - mx).exp();
                sum += *p;
            }
            prow.iter_mut().for_each(|p| *p /= sum);
            total += (mx + sum.ln() - row[t]).as_f64();
        }
        let loss = T::from_f64_lossy(total / count as f64);
        let value = Matrix::from_fn(1, 1, |_, _| loss);
        let g = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        Ok(self.push(value, op, g))
    }

    /// `U·Vᵀ` from the rank-`rank` randomized SVD of `m`.
    pub fn svd_normalize(&mut self, m: Var, rank: usize, config: &SvdConfig) -> Result<Var> {
        if let Some(poisoned) = self.non_finite_passthrough(m) {
            return Ok(poisoned);
        }
        let (u, v) = linalg::svd_normalize(self.value(m), rank, config)?;
        let value = Matrix::product(&u, false, &v, true)?;
        let g = self.any_grad(&[m]);
        Ok(self.push(value, Op::SvdMap { m, rank, map: SvdMap::Orthogonal }, g))
    }

    /// Rank-`rank` approximation `U·diag(s)·Vᵀ` from the randomized SVD.
    pub fn svd_truncate(&mut self, m: Var, rank: usize, config: &SvdConfig) -> Result<Var> {
        if let Some(poisoned) = self.non_finite_passthrough(m) {
            return Ok(poisoned);
        }
        let svd = linalg::low_rank_svd(self.value(m), rank, config)?;
        let keep = svd.retained();
        let mut s = svd.singular_values.clone();
        s[keep..].iter_mut().for_each(|x| *x = T::zero());
        let us = linalg::scale_columns(&svd.left_vectors, &s);
        let value = Matrix::product(&us, false, &svd.right_vectors, true)?;
        let g = self.any_grad(&[m]);
        Ok(self.push(value, Op::SvdMap { m, rank, map: SvdMap::Truncated }, g))
    }

    /// Non-finite input has no SVD; the result is all NaN so the failure
    /// surfaces in the loss the way ordinary arithmetic would propagate it.
    fn non_finite_passthrough(&mut self, m: Var) -> Option<Var> {
        let mv = self.value(m);
        if mv.is_finite() {
            return None;
        }
        let (r, c) = mv.shape();
        Some(self.constant(Matrix::from_fn(r, c, |_, _| T::nan())))
    }

    pub fn frobenius_normalize(&mut self, m: Var) -> Var {
        let value = linalg::frobenius_normalize(self.value(m));
        let g = self.any_grad(&[m]);
        self.push(value, Op::Frobenius(m), g)
    }

    /// `Σ_ij w_ij·x_ij` for a constant weighting `w` (1×1).
    pub fn weighted_sum(&mut self, x: Var, weights: Matrix<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::dim("weighted_sum", xv.shape(), weights.shape()));
        }
        let s = xv
            .as_slice()
            .iter()
            .zip(weights.as_slice())
            .fold(T::zero(), |a, (&p, &q)| a + p * q);
        let value = Matrix::from_fn(1, 1, |_, _| s);
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::WeightedSum { x, weights }, g))
    }

    /// Reverse pass from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix<T>>> = (0..n).map(|_| None).collect();
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::dim("backward (scalar loss)", (1, 1), self.value(loss).shape()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(T::one(), &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    /// `grad(v) += alpha·op(a)·op(b)` without a temporary when possible.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_product(
        &self,
        grads: &mut [Option<Matrix<T>>],
        v: Var,
        a: &Matrix<T>,
        ta: bool,
        b: &Matrix<T>,
        tb: bool,
    ) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                gemm_acc(existing, T::one(), a, ta, b, tb, T::one());
                Ok(())
            }
            slot @ None => {
                *slot = Some(Matrix::product(a, ta, b, tb)?);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if ta {
                    self.accumulate_product(grads, a, bv, tb, g, true)?;
                } else {
                    self.accumulate_product(grads, a, g, false, bv, !tb)?;
                }
                if tb {
                    self.accumulate_product(grads, b, g, true, av, ta)?;
                } else {
                    self.accumulate_product(grads, b, av, !ta, g, false)?;
                }
            }
            &Op::Add(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, a, g.clone())?;
                }
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s))?,
            &Op::SliceRows { x, start } => {
                let xv = self.value(x);
                let mut full = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    full.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, x, full)?;
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.cols();
                let dn = T::from_usize(d.max(1)).unwrap();
                let mut dx = Matrix::zeros(xv.rows(), d);
                let mut dg = Matrix::zeros(1, d);
                for i in 0..xv.rows() {
                    let inv = inv_rms[i];
                    let (xr, gr) = (xv.row(i), g.row(i));
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += gr[j] * gv.as_slice()[j] * xr[j];
                        let cur = dg.get(0, j);
                        dg.set(0, j, cur + gr[j] * xr[j] * inv);
                    }
                    let coef = inv * inv * inv * dot / dn;
                    let dxr = dx.row_mut(i);
                    for j in 0..d {
                        dxr[j] = inv * gr[j] * gv.as_slice()[j] - coef * xr[j];
                    }
                }
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gain, dg)?;
            }
            &Op::Rope { x, n_heads, offset } => {
                let mut dx = g.clone();
                rotate(&mut dx, n_heads, offset, true);
                self.accumulate(grads, x, dx)?;
            }
            Op::Attention { q, k, v, n_heads, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *n_heads, probs, g);
                self.accumulate(grads, *q, dq)?;
                self.accumulate(grads, *k, dk)?;
                self.accumulate(grads, *v, dv)?;
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let data = xv
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(&v, &gv)| gv * gelu_grad(v))
                    .collect();
                self.accumulate(grads, x, Matrix::from_vec(xv.rows(), xv.cols(), data)?)?;
            }
            Op::Embedding { table, tokens } => {
                if self.nodes[table.0].needs_grad {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &t) in tokens.iter().enumerate() {
                        for (d, &x) in dt.row_mut(t).iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *table, dt)?;
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let scale = g.get(0, 0) / T::from_usize(*count).unwrap();
                let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                for i in 0..probs.rows() {
                    if !mask[i] {
                        continue;
                    }
                    let row = dl.row_mut(i);
                    for (d, &p) in row.iter_mut().zip(probs.row(i)) {
                        *d = p * scale;
                    }
                    row[targets[i]] -= scale;
                }
                self.accumulate(grads, *logits, dl)?;
            }
            &Op::SvdMap { m, rank, map } => {
                let full = linalg::jacobi_svd(self.value(m));
                let dm = linalg::svd_backward(&full, rank, map, g)?;
                self.accumulate(grads, m, dm)?;
            }
            &Op::Frobenius(m) => {
                let dm = linalg::frobenius_backward(self.value(m), g)?;
                self.accumulate(grads, m, dm)?;
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, weights.scale(g.get(0, 0)))?;
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: &[T],
        g: &Matrix<T>,
    ) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (m, d) = qv.shape();
        let hd = d / n_heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let mut dq = Matrix::<T>::zeros(m, d);
        let mut dk = Matrix::<T>::zeros(m, d);
        let mut dv = Matrix::<T>::zeros(m, d);
        let mut dp = vec![T::zero(); m * m];
        for h in 0..n_heads {
            let p = &probs[h * m * m..(h + 1) * m * m];
            let off = h * hd;
            unsafe {
                // dV_h = Pᵀ dO_h
                T::gemm(
                    m, m, hd, T::one(),
                    p.as_ptr(), 1, m as isize,
                    g.as_slice().as_ptr().add(off), d as isize, 1,
                    T::zero(), dv.as_mut_slice().as_mut_ptr().add(off), d as isize, 1,
                );
                // dP = dO_h V_hᵀ
                T::gemm(
                    m, hd, m, T::one(),
                    g.as_slice().as_ptr().add(off), d as isize, 1,
                    vv.as_slice().as_ptr().add(off), 1, d as isize,
                    T::zero(), dp.as_mut_ptr(), m as isize, 1,
                );
            }
            // dS = P ∘ (dP − rowsum(P ∘ dP))
            for i in 0..m {
                let pr = &p[i * m..(i + 1) * m];
                let dr = &mut dp[i * m..(i + 1) * m];
                let s = pr[..=i].iter().zip(dr[..=i].iter()).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - s);
                }
                dr[i + 1..].iter_mut().for_each(|e| *e = T::zero());
            }
            unsafe {
                // dQ_h = scale · dS K_h
                T::gemm(
                    m, m, hd, scale,
                    dp.as_ptr(), m as isize, 1,
                    kv.as_slice().as_ptr().add(off), d as isize, 1,
                    T::zero(), dq.as_mut_slice().as_mut_ptr().add(off), d as isize, 1,
                );
                // dK_h = scale · dSᵀ Q_h
                T::gemm(
                    m, m, hd, scale,
                    dp.as_ptr(), 1, m as isize,
                    qv.as_slice().as_ptr().add(off), d as isize, 1,
                    T::zero(), dk.as_mut_slice().as_mut_ptr().add(off), d as isize, 1,
                );
            }
        }
        (dq, dk, dv)
    }
}

fn gelu<T: Real>(x: T) -> T {
    let (c, k) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_K));
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, k) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_K));
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// In-place rotary rotation (or its inverse) of interleaved pairs.
fn rotate<T: Real>(m: &mut Matrix<T>, n_heads: usize, offset: usize, inverse: bool) {
    let d = m.cols();
    let hd = d / n_heads;
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / hd as f64))
        .collect();
    for r in 0..m.rows() {
        let pos = (offset + r) as f64;
        let row = m.row_mut(r);
        for (i, &f) in freqs.iter().enumerate() {
            let (s, c) = (pos * f).sin_cos();
            let (s, c) = (T::from_f64_lossy(if inverse { -s } else { s }), T::from_f64_lossy(c));
            for h in 0..n_heads {
                let base = h * hd + 2 * i;
                let (x0, x1) = (row[base], row[base + 1]);
                row[base] = x0 * c - x1 * s;
                row[base + 1] = x0 * s + x1 * c;
            }
        }
    }
}
