use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, AttnDims};
use super::mask::AttentionMask;
use super::Tensor;
use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` accepted by [`Var::embedding_mix`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Mul { a: usize, b: usize },
    MulConst { a: usize, factor: Vec<f64> },
    Scale { a: usize, c: f64 },
    Sum { a: usize },
    Gelu { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { a: usize, temperature: f64 },
    Nll { logits: usize, targets: Vec<Option<usize>>, scale: f64, probs: Vec<f64> },
    Gather { sources: Vec<usize>, index: Vec<(usize, usize)> },
    Attention { q: usize, k: usize, v: usize, mask: Arc<AttentionMask>, heads: usize, probs: Vec<f64> },
    Reshape { a: usize },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// Node ids are append positions, so every input precedes its consumer and
/// the reverse append order is a valid topological order. A tape is confined
/// to the thread that created it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Tensor>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records an existing shared tensor as a leaf without copying it.
    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Output row `r` is row `index[r].1` of `sources[index[r].0]`. All
    /// sources must share the same column count.
    pub fn gather_rows<'t>(&'t self, sources: &[Var<'t>], index: &[(usize, usize)]) -> Result<Var<'t>> {
        if sources.is_empty() {
            return Err(Error::invalid("gather_rows needs at least one source"));
        }
        let values: Vec<Arc<Tensor>> = sources.iter().map(|s| s.value()).collect();
        let cols = values[0].cols();
        for v in &values {
            if v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        if index.is_empty() {
            return Err(Error::invalid("gather_rows with an empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in index {
            let src = values
                .get(s)
                .ok_or_else(|| Error::invalid(format!("gather source {s} out of range")))?;
            if r >= src.rows() {
                return Err(Error::invalid(format!(
                    "gather row {r} out of range for {:?}",
                    src.shape()
                )));
            }
            data.extend_from_slice(src.row(r));
        }
        let ids: Vec<usize> = sources.iter().map(|s| s.id).collect();
        let rg = self.rg(&ids);
        let out = Tensor::matrix(index.len(), cols, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                sources: ids,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks the rows of every part in order.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let mut index = Vec::new();
        for (s, p) in parts.iter().enumerate() {
            index.extend((0..p.value().rows()).map(|r| (s, r)));
        }
        self.gather_rows(parts, &index)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding_lookup<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let vocab = table.value().rows();
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let index: Vec<(usize, usize)> = ids.iter().map(|&i| (0, i)).collect();
        self.gather_rows(&[table], &index)
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values (see [`AttentionMask`] for the batch layout).
    pub fn attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        mask: Arc<AttentionMask>,
        heads: usize,
    ) -> Result<Var<'t>> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let d = qv.cols();
        let dims = AttnDims {
            batch: mask.batch(),
            q_len: mask.q_len(),
            k_len: mask.k_len(),
            heads,
            model_dim: d,
        };
        if heads == 0 || d % heads != 0 || kv.cols() != d || vv.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        if qv.rows() != dims.batch * dims.q_len
            || kv.rows() != dims.batch * dims.k_len
            || vv.rows() != kv.rows()
        {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                lhs: vec![qv.rows(), kv.rows()],
                rhs: vec![dims.batch, dims.q_len, dims.k_len],
            });
        }
        let (out, probs) = kernels::attention_forward(qv.data(), kv.data(), vv.data(), &mask, &dims);
        let rg = self.rg(&[q.id, k.id, v.id]);
        Ok(self.push(
            Tensor::matrix(qv.rows(), d, out)?,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                mask,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Gradient accumulated for a leaf by previous [`Tape::backward`] calls.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.leaf_grads.borrow().get(&var.id).cloned()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Propagates `d loss / d node` from a scalar `loss` back to every leaf
    /// that requires a gradient, adding into the leaf gradient buffers.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        let mut t = Tensor::zeros(node.value.shape().to_vec());
                        t.add_assign(&g);
                        leaf_grads.insert(id, t);
                    }
                }
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: &[f64]) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn with_grad<F>(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: F)
where
    F: FnOnce(&mut [f64]),
{
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.numel();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            with_grad(grads, nodes, *a, |da| kernels::gemm(m, n, k, g, false, bv.data(), true, 1.0, da));
            with_grad(grads, nodes, *b, |db| kernels::gemm(k, m, n, av.data(), true, g, false, 1.0, db));
        }
        Op::Add { a, b } => {
            accumulate(grads, nodes, *a, g);
            accumulate(grads, nodes, *b, g);
        }
        Op::AddRow { a, bias } => {
            accumulate(grads, nodes, *a, g);
            let cols = out.cols();
            with_grad(grads, nodes, *bias, |db| {
                for row in g.chunks_exact(cols) {
                    db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
            });
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            with_grad(grads, nodes, *a, |da| {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv.data()) {
                    *d += gi * bi;
                }
            });
            with_grad(grads, nodes, *b, |db| {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av.data()) {
                    *d += gi * ai;
                }
            });
        }
        Op::MulConst { a, factor } => with_grad(grads, nodes, *a, |da| {
            for ((d, gi), f) in da.iter_mut().zip(g).zip(factor) {
                *d += gi * f;
            }
        }),
        Op::Scale { a, c } => with_grad(grads, nodes, *a, |da| {
            da.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi);
        }),
        Op::Sum { a } => with_grad(grads, nodes, *a, |da| da.iter_mut().for_each(|d| *d += g[0])),
        Op::Gelu { a } => {
            let av = &nodes[*a].value;
            with_grad(grads, nodes, *a, |da| {
                for ((d, gi), &x) in da.iter_mut().zip(g).zip(av.data()) {
                    *d += gi * kernels::gelu_grad(x);
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let cols = out.cols();
            let gv = nodes[*gamma].value.clone();
            with_grad(grads, nodes, *gamma, |dg| {
                for (grow, hrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    for ((d, gi), h) in dg.iter_mut().zip(grow).zip(hrow) {
                        *d += gi * h;
                    }
                }
            });
            with_grad(grads, nodes, *beta, |db| {
                for grow in g.chunks_exact(cols) {
                    db.iter_mut().zip(grow).for_each(|(d, gi)| *d += gi);
                }
            });
            with_grad(grads, nodes, *x, |dx| {
                let n = cols as f64;
                let mut dh = vec![0.0; cols];
                for (r, ((grow, hrow), dxrow)) in g
                    .chunks_exact(cols)
                    .zip(xhat.chunks_exact(cols))
                    .zip(dx.chunks_exact_mut(cols))
                    .enumerate()
                {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..cols {
                        dh[c] = grow[c] * gv.data()[c];
                        mean_dh += dh[c];
                        mean_dh_h += dh[c] * hrow[c];
                    }
                    mean_dh /= n;
                    mean_dh_h /= n;
                    for c in 0..cols {
                        dxrow[c] += rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                    }
                }
            });
        }
        Op::Softmax { a, temperature } => {
            let cols = out.cols();
            with_grad(grads, nodes, *a, |da| {
                for ((grow, yrow), drow) in g
                    .chunks_exact(cols)
                    .zip(out.data().chunks_exact(cols))
                    .zip(da.chunks_exact_mut(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        drow[c] += yrow[c] * (grow[c] - dot) / temperature;
                    }
                }
            });
        }
        Op::Nll { logits, targets, scale, probs } => {
            let cols = nodes[*logits].value.cols();
            with_grad(grads, nodes, *logits, |dl| {
                let s = g[0] * scale;
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let row = &mut dl[r * cols..(r + 1) * cols];
                    let p = &probs[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        row[c] += s * p[c];
                    }
                    row[*t] -= s;
                }
            });
        }
        Op::Gather { sources, index } => {
            let cols = out.cols();
            for (r, &(si, row)) in index.iter().enumerate() {
                with_grad(grads, nodes, sources[si], |ds| {
                    let dst = &mut ds[row * cols..(row + 1) * cols];
                    dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(d, x)| *d += x);
                });
            }
        }
        Op::Attention { q, k, v, mask, heads, probs } => {
            let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
            let dims = AttnDims {
                batch: mask.batch(),
                q_len: mask.q_len(),
                k_len: mask.k_len(),
                heads: *heads,
                model_dim: qv.cols(),
            };
            let (dq, dk, dv) =
                kernels::attention_backward(qv.data(), kv.data(), vv.data(), probs, g, mask, &dims);
            accumulate(grads, nodes, *q, &dq);
            accumulate(grads, nodes, *k, &dk);
            accumulate(grads, nodes, *v, &dv);
        }
        Op::Reshape { a } => accumulate(grads, nodes, *a, g),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    /// Borrow of the forward value; do not hold across op construction.
    pub fn value_ref(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_ref())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let rg = self.tape.rg(inputs);
        self.tape.push(value, op, rg)
    }

    /// `[..., k] × [k, n] → [..., n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if b.rank() != 2 || a.rank() == 0 || a.cols() != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    /// Treats each row of `self` as a distribution over the rows of `table`
    /// and returns the expected embedding.
    pub fn embedding_mix(self, table: Var<'t>) -> Result<Var<'t>> {
        {
            let dist = self.value_ref();
            for r in 0..dist.rows() {
                let row = dist.row(r);
                let sum: f64 = row.iter().sum();
                if !sum.is_finite() || (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
                    return Err(Error::NotNormalized { row: r, sum });
                }
            }
        }
        self.matmul(table)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor::new(a.shape().to_vec(), data)?, Op::Add { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        if b.numel() != a.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(a.cols()) {
            row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        Ok(self.push(Tensor::new(a.shape().to_vec(), data)?, Op::AddRow { a: self.id, bias: bias.id }, &[self.id, bias.id]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor::new(a.shape().to_vec(), data)?, Op::Mul { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale { a: self.id, c }, &[self.id])
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: self.id }, &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| kernels::gelu_scalar(x)).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu { a: self.id }, &[self.id])
    }

    /// Row-wise normalization to zero mean and unit variance followed by the
    /// affine map `γ·x̂ + β`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let cols = x.cols();
        if gv.numel() != cols || bv.numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.rows();
        let mut out = vec![0.0; x.numel()];
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        Ok(self.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// `softmax(x / temperature)` along the last axis.
    pub fn softmax(self, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid(format!("softmax temperature must be positive, got {temperature}")));
        }
        let a = self.value();
        if !a.is_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let mut out = vec![0.0; a.numel()];
        kernels::softmax_rows(a.data(), a.cols(), temperature, &mut out);
        Ok(self.push(
            Tensor::new(a.shape().to_vec(), out)?,
            Op::Softmax {
                a: self.id,
                temperature,
            },
            &[self.id],
        ))
    }

    /// `scale · Σ_r −log softmax(logits_r)[target_r]` over rows whose target
    /// is `Some`.
    pub fn nll(self, targets: &[Option<usize>], scale: f64) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "nll",
                lhs: a.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().flatten().find(|&&t| t >= cols) {
            return Err(Error::TokenOutOfRange { id: t, vocab: cols });
        }
        if !a.is_finite() {
            return Err(Error::NonFinite("nll logits"));
        }
        let mut probs = vec![0.0; a.numel()];
        kernels::softmax_rows(a.data(), cols, 1.0, &mut probs);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = a.row(r);
                total += kernels::log_sum_exp(row) - row[*t];
            }
        }
        Ok(self.push(
            Tensor::scalar(scale * total),
            Op::Nll {
                logits: self.id,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            &[self.id],
        ))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let t: Vec<Option<usize>> = targets.iter().copied().map(Some).collect();
        let n = targets.len().max(1) as f64;
        self.nll(&t, 1.0 / n)
    }

    /// Zeroes each element with probability `rate` and rescales survivors by
    /// `1/(1−rate)`.
    pub fn dropout<R: Rng + ?Sized>(self, rate: f64, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(self);
        }
        let a = self.value();
        let keep = 1.0 / (1.0 - rate);
        let factor: Vec<f64> = (0..a.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = a.data().iter().zip(&factor).map(|(x, f)| x * f).collect();
        Ok(self.push(Tensor::new(a.shape().to_vec(), data)?, Op::MulConst { a: self.id, factor }, &[self.id]))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a: self.id }, &[self.id]))
    }

    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let index: Vec<(usize, usize)> = rows.iter().map(|&r| (0, r)).collect();
        self.tape.gather_rows(&[self], &index)
    }
}
