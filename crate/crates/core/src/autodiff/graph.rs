//! Tape of primitive applications and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the tape order is already a
//! topological order and the backward pass is a single reverse scan.

use std::collections::BTreeMap;

use super::tensor::{gemm, log_softmax_row, logsumexp, softmax_row, Tensor};
use super::ParamStore;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule supplied by the caller for a custom node. Receives the
/// upstream gradient (shape of the node's value) and returns one gradient per
/// input, in input order.
pub type CustomBackward = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Add(Var, Var, bool),
    Sub(Var, Var),
    Mul(Var, Var, bool),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gather { table: Var, idx: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SumAll(Var),
    MeanAll(Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Elementwise compatibility: equal shapes, or `b` broadcast over the leading
/// extent of `a`.
fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if a.rank() >= 1 && &a.shape()[1..] == b.shape() {
        Ok(true)
    } else {
        Err(shape_err(op, a, b))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, true)
    }

    /// Binds a named parameter from `store` as a leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let v = self.leaf(t)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = broadcast_kind("add", ta, tb)?;
        let mut out = ta.clone();
        let c = tb.len().max(1);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += tb.data()[if bc { i % c } else { i }];
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b, bc), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("sub", ta, tb));
        }
        let mut out = ta.clone();
        for (o, y) in out.data_mut().iter_mut().zip(tb.data()) {
            *o -= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    /// Elementwise product (the gate operator).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = broadcast_kind("mul", ta, tb)?;
        let mut out = ta.clone();
        let c = tb.len().max(1);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= tb.data()[if bc { i % c } else { i }];
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b, bc), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(shape_err("matmul", va, vb));
        }
        let (m, k) = if ta {
            (va.shape()[1], va.shape()[0])
        } else {
            (va.shape()[0], va.shape()[1])
        };
        let (k2, n) = if tb {
            (vb.shape()[1], vb.shape()[0])
        } else {
            (vb.shape()[0], vb.shape()[1])
        };
        if k != k2 {
            return Err(shape_err("matmul", va, vb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), ta, vb.data(), tb, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::Matmul { a, b, ta, tb }, rg)
    }

    /// `x W^T + b` with `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, false, w, true)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push("tanh", out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(x);
        self.push("sigmoid", out, Op::Sigmoid(x), rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = super::tensor::softmax(self.value(x));
        let rg = self.rg(x);
        self.push("softmax", out, Op::Softmax(x), rg)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = super::tensor::log_softmax(self.value(x));
        let rg = self.rg(x);
        self.push("log_softmax", out, Op::LogSoftmax(x), rg)
    }

    /// Row-wise logsumexp; drops the last axis.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        let vals: Vec<f64> = t.data().chunks(c).map(logsumexp).collect();
        let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        let rg = self.rg(x);
        self.push("logsumexp", Tensor::new(shape, vals)?, Op::LogSumExp(x), rg)
    }

    /// Row-wise normalization to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(t.outer());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push("layer_norm", out, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Row lookup (`embedding_lookup`): `table[idx[i], :]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::Invalid(format!("gather index {i} out of range {n}")));
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        self.push(
            "gather",
            Tensor::new(vec![idx.len(), c], out)?,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Concatenates rank-2 tensors along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Invalid("concat needs parts and axis 0 or 1".into()));
        }
        let first = self.value(parts[0]).clone();
        if first.rank() != 2 {
            return Err(shape_err("concat", &first, &first));
        }
        let other = 1 - axis;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[other] != first.shape()[other] {
                return Err(shape_err("concat", &first, t));
            }
            total += t.shape()[axis];
        }
        let out = if axis == 0 {
            let mut d = Vec::with_capacity(total * first.shape()[1]);
            for &p in parts {
                d.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![total, first.shape()[1]], d)?
        } else {
            let rows = first.shape()[0];
            let mut d = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    d.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(vec![rows, total], d)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Contiguous slice of a rank-2 tensor along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || axis > 1 || start + len > t.shape()[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let out = if axis == 0 {
            Tensor::new(vec![len, cols], t.data()[start * cols..(start + len) * cols].to_vec())?
        } else {
            let mut d = Vec::with_capacity(rows * len);
            for r in 0..rows {
                d.extend_from_slice(&t.row(r)[start..start + len]);
            }
            Tensor::new(vec![rows, len], d)?
        };
        let rg = self.rg(x);
        self.push("slice", out, Op::Slice { x, axis, start }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push("reduce_sum", Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Invalid("mean of empty tensor".into()));
        }
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(x);
        self.push("reduce_mean", Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push("scale", out, Op::Scale(x, k), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(shape_err("transpose", t, t));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push("transpose", Tensor::new(vec![c, r], d)?, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", out, Op::Reshape(x), rg)
    }

    /// Scales each row to unit L2 norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.outer());
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Invalid(format!("normalize_rows: row {i} has zero norm")));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push("normalize_rows", out, Op::NormalizeRows { x, norms }, rg)
    }

    /// Node whose value and gradient rule are supplied by the caller. This is
    /// how the lattice losses enter the tape without recording their DP loops.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "custom",
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let gb = if *bc { sum_leading(g, self.value(*b)) } else { g.clone() };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = vb.len().max(1);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        *x *= vb.data()[if *bc { i % c } else { i }];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut prod = g.clone();
                    for (x, y) in prod.data_mut().iter_mut().zip(va.data()) {
                        *x *= y;
                    }
                    let gb = if *bc { sum_leading(&prod, vb) } else { prod };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let k = if *ta { va.shape()[0] } else { va.shape()[1] };
                if self.rg(*a) {
                    // dA = dC op(B)^T, stored transposed when A was.
                    let mut ga = vec![0.0; va.len()];
                    if *ta {
                        gemm(k, n, m, vb.data(), *tb, g.data(), true, 0.0, &mut ga);
                    } else {
                        gemm(m, n, k, g.data(), false, vb.data(), !*tb, 0.0, &mut ga);
                    }
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    if *tb {
                        gemm(n, m, k, g.data(), true, va.data(), *ta, 0.0, &mut gb);
                    } else {
                        gemm(k, m, n, va.data(), !*ta, g.data(), false, 0.0, &mut gb);
                    }
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::Tanh(x) => {
                let mut gx = g.clone();
                for (d, y) in gx.data_mut().iter_mut().zip(out.data()) {
                    *d *= 1.0 - y * y;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let mut gx = g.clone();
                for (d, y) in gx.data_mut().iter_mut().zip(out.data()) {
                    *d *= y * (1.0 - y);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let c = out.last_dim();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (d, y) in gr.iter_mut().zip(yr) {
                        *d = y * (*d - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let c = out.last_dim();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let s: f64 = gr.iter().sum();
                    for (d, y) in gr.iter_mut().zip(yr) {
                        *d -= y.exp() * s;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSumExp(x) => {
                let vx = self.value(*x);
                let c = vx.last_dim();
                let mut gx = vx.clone();
                for ((row, &up), &lse) in gx.data_mut().chunks_mut(c).zip(g.data()).zip(out.data()) {
                    for v in row.iter_mut() {
                        *v = up * (*v - lse).exp();
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = out.last_dim();
                let mut gx = g.clone();
                for ((gr, yr), is) in gx.data_mut().chunks_mut(c).zip(out.data().chunks(c)).zip(inv_std) {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for (d, y) in gr.iter_mut().zip(yr) {
                        *d = is * (*d - mg - y * mgy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { table, idx } => {
                if self.rg(*table) {
                    let vt = self.value(*table);
                    let c = vt.last_dim();
                    let mut gt = Tensor::zeros(vt.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut gt.data_mut()[i * c..(i + 1) * c];
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let shp = self.value(p).shape().to_vec();
                    let len = shp[*axis];
                    if self.rg(p) {
                        let gp = slice2(g, *axis, offset, len);
                        self.accumulate(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.shape());
                let cols = vx.shape()[1];
                if *axis == 0 {
                    gx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                } else {
                    let len = g.shape()[1];
                    for r in 0..vx.shape()[0] {
                        gx.data_mut()[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let up = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), up));
            }
            Op::MeanAll(x) => {
                let vx = self.value(*x);
                let up = g.item() / vx.len() as f64;
                self.accumulate(grads, *x, Tensor::full(vx.shape(), up));
            }
            Op::Scale(x, k) => {
                self.accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![c, r], d)?);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.value(*x).shape())?);
            }
            Op::NormalizeRows { x, norms } => {
                let c = out.last_dim();
                let mut gx = g.clone();
                for ((gr, yr), n) in gx.data_mut().chunks_mut(c).zip(out.data().chunks(c)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (d, y) in gr.iter_mut().zip(yr) {
                        *d = (*d - y * dot) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Custom { inputs, backward } => {
                let gs = backward(g);
                if gs.len() != inputs.len() {
                    return Err(Error::Invalid("custom backward returned wrong arity".into()));
                }
                for (&v, gv) in inputs.iter().zip(gs) {
                    if gv.shape() != self.value(v).shape() {
                        return Err(shape_err("custom", self.value(v), &gv));
                    }
                    self.accumulate(grads, v, gv);
                }
            }
        }
        Ok(())
    }

    /// Gradients for every bound parameter, zero-filled where unused.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn sum_leading(g: &Tensor, target: &Tensor) -> Tensor {
    let c = target.len().max(1);
    let mut out = Tensor::zeros(target.shape());
    for (i, v) in g.data().iter().enumerate() {
        out.data_mut()[i % c] += v;
    }
    out
}

fn slice2(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    if axis == 0 {
        Tensor::new(vec![len, cols], t.data()[start * cols..(start + len) * cols].to_vec())
            .expect("slice shape")
    } else {
        let mut d = Vec::with_capacity(rows * len);
        for r in 0..rows {
            d.extend_from_slice(&t.row(r)[start..start + len]);
        }
        Tensor::new(vec![rows, len], d).expect("slice shape")
    }
}

/// Log-softmax of a plain row slice, re-exported for callers that need the
/// value without a tape.
pub fn log_softmax_slice(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    log_softmax_row(xs, &mut out);
    out
}

/// Softmax of a plain row slice.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    softmax_row(xs, &mut out);
    out
}
