// SPDX-License-Identifier: MIT OR Apache-2.0

//! Eager reverse-mode tape over [`Tensor`] values.
//!
//! Every operation computes its value immediately and records the parents it
//! needs for the backward pass. Nodes are appended in creation order, so the
//! node list is already a topological order and `backward` simply walks it in
//! reverse.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Tensor, COSINE_NORM_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    StopGrad(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Mean(Var),
    Sum(Var),
    CosineRows(Var, Var),
    CrossEntropy(Var, Vec<usize>, Tensor),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::StopGrad(a)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::CausalSoftmax(a)
            | Op::Gelu(a)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::CrossEntropy(a, _, _) => vec![*a],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::CosineRows(a, b) => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// How a node can reach the root of a backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Reach {
    /// Along a path with no stop-gradient edge.
    pub direct: bool,
    /// Along a path crossing at least one stop-gradient edge.
    pub through_stop: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf | Op::StopGrad(_) => false,
            Op::Param(_) => unreachable!("params are pushed by Tape::param"),
            other => other
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A free input whose gradient is tracked (used by tests and gradient checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.shared_value(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Forward identity; backward contributes nothing to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.nodes.push(Node {
            value,
            op: Op::StopGrad(x),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a), false);
        self.push(v, Op::Softmax(a))
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || av.rows() != av.cols() {
            return Err(Error::InvalidShape {
                shape: av.shape().to_vec(),
                reason: "causal softmax expects a square matrix".into(),
            });
        }
        let v = softmax_rows(av, true);
        Ok(self.push(v, Op::CausalSoftmax(a)))
    }

    /// Row-wise layer normalization followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != c || bv.len() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let (gd, bd) = (gv.data(), bv.data());
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = xhat.get(i, j) * gd[j] + bd[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = (tv.rows(), tv.cols());
        if ids.is_empty() {
            return Err(Error::InvalidArgument("gather with no indices".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let v = Tensor::from_vec(vec![ids.len(), c], data)?;
        Ok(self.push(v, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.rows() {
            return Err(Error::InvalidArgument(format!(
                "row slice {start}..{} out of range for {} rows",
                start + len,
                xv.rows()
            )));
        }
        let v = xv.slice_rows(start, len);
        Ok(self.push(v, Op::SliceRows(x, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if len == 0 || start + len > c {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let v = Tensor::from_vec(vec![r, len], data)?;
        Ok(self.push(v, Op::SliceCols(x, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            data.extend_from_slice(pv.data());
        }
        let r = data.len() / c;
        let v = Tensor::from_vec(vec![r, c], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::from_vec(vec![r, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Mean of all elements, as a 1-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Cosine similarity between matching rows of `p` and `z`; rows whose
    /// norm is below the floor yield 0.
    pub fn cosine_rows(&mut self, p: Var, z: Var) -> Result<Var> {
        let (pv, zv) = (self.value(p), self.value(z));
        if pv.shape() != zv.shape() {
            return Err(Error::ShapeMismatch {
                op: "cosine_rows",
                lhs: pv.shape().to_vec(),
                rhs: zv.shape().to_vec(),
            });
        }
        let out: Vec<f64> = (0..pv.rows())
            .map(|i| crate::numerics::cosine_slices(pv.row(i), zv.row(i)))
            .collect();
        let v = Tensor::vector(out);
        Ok(self.push(v, Op::CosineRows(p, z)))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "target {t} out of range for {c} classes"
            )));
        }
        let probs = softmax_rows(lv, false);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Tensor::scalar(total / r as f64);
        Ok(self.push(v, Op::CrossEntropy(logits, targets.to_vec(), probs)))
    }

    /// Classifies every node by how it reaches `root`.
    pub fn reachability(&self, root: Var) -> Vec<Reach> {
        let mut reach = vec![Reach::default(); self.nodes.len()];
        reach[root.0].direct = true;
        for idx in (0..=root.0).rev() {
            let r = reach[idx];
            if !r.direct && !r.through_stop {
                continue;
            }
            let node = &self.nodes[idx];
            let is_stop = matches!(node.op, Op::StopGrad(_));
            for p in node.op.parents() {
                let pr = &mut reach[p.0];
                if is_stop {
                    pr.through_stop |= r.direct || r.through_stop;
                } else {
                    pr.direct |= r.direct;
                    pr.through_stop |= r.through_stop;
                }
            }
        }
        reach
    }

    /// Reachability of every parameter bound on this tape, in id order.
    pub fn param_reachability(&self, root: Var) -> Vec<(ParamId, Reach)> {
        let reach = self.reachability(root);
        self.nodes
            .iter()
            .zip(&reach)
            .filter_map(|(n, r)| match n.op {
                Op::Param(id) => Some((id, *r)),
                _ => None,
            })
            .collect::<std::collections::BTreeMap<_, _>>()
            .into_iter()
            .collect()
    }

    /// Parameters bound on this tape with their nodes, in id order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<_> = self.params.iter().map(|(k, v)| (*k, *v)).collect();
        v.sort();
        v
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Writes gradients of bound parameters into the store's accumulators.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) -> Result<()> {
        for (id, v) in self.bound_params() {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }

    /// Parameter gradients as owned tensors, in id order.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        self.bound_params()
            .into_iter()
            .filter_map(|(id, v)| grads.get(v).map(|g| (id, g.clone())))
            .collect()
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    emit(grads, *a, matmul_nt(g, val(*b))?)?;
                }
                if wants(*b) {
                    emit(grads, *b, matmul_tn(val(*a), g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if wants(*a) {
                    emit(grads, *a, matmul(g, val(*b))?)?;
                }
                if wants(*b) {
                    emit(grads, *b, matmul_tn(g, val(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    emit(grads, *a, g.clone())?;
                }
                if wants(*b) {
                    emit(grads, *b, g.clone())?;
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    emit(grads, *x, g.clone())?;
                }
                if wants(*bias) {
                    let sums = column_sums(g, g.cols());
                    emit(
                        grads,
                        *bias,
                        Tensor::from_vec(val(*bias).shape().to_vec(), sums)?,
                    )?;
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    emit(grads, *a, g.mul(val(*b))?)?;
                }
                if wants(*b) {
                    emit(grads, *b, g.mul(val(*a))?)?;
                }
            }
            Op::Scale(a, s) => emit(grads, *a, g.scale(*s))?,
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let y = &node.value;
                let mut out = g.clone();
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in out.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                emit(grads, *a, out)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain).data();
                let c = xhat.cols();
                if wants(*gain) {
                    let mut gg = vec![0.0; c];
                    for i in 0..xhat.rows() {
                        for ((acc, gr), xh) in gg.iter_mut().zip(g.row(i)).zip(xhat.row(i)) {
                            *acc += gr * xh;
                        }
                    }
                    emit(
                        grads,
                        *gain,
                        Tensor::from_vec(val(*gain).shape().to_vec(), gg)?,
                    )?;
                }
                if wants(*bias) {
                    emit(
                        grads,
                        *bias,
                        Tensor::from_vec(val(*bias).shape().to_vec(), column_sums(g, c))?,
                    )?;
                }
                if wants(*x) {
                    let mut dx = g.clone();
                    let mut dxhat = vec![0.0; c];
                    for (i, &is) in inv_std.iter().enumerate() {
                        let (gr, xh) = (g.row(i), xhat.row(i));
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = is * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                    emit(grads, *x, dx)?;
                }
            }
            Op::Gelu(a) => {
                let d = val(*a).map(|x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
                });
                emit(grads, *a, g.mul(&d)?)?;
            }
            Op::GatherRows(table, ids) => {
                let acc = zeroed_slot(grads, *table, val(*table).shape());
                for (k, &i) in ids.iter().enumerate() {
                    for (o, gv) in acc.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += gv;
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let c = val(*x).cols();
                let acc = zeroed_slot(grads, *x, val(*x).shape());
                for (o, v) in acc.data_mut()[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g.data())
                {
                    *o += v;
                }
            }
            Op::SliceCols(x, start) => {
                let len = g.cols();
                let acc = zeroed_slot(grads, *x, val(*x).shape());
                for i in 0..g.rows() {
                    for (o, v) in acc.row_mut(i)[*start..start + len].iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    if wants(p) {
                        let chunk = g.data()[offset..offset + pv.len()].to_vec();
                        emit(grads, p, Tensor::from_vec(pv.shape().to_vec(), chunk)?)?;
                    }
                    offset += pv.len();
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if wants(p) {
                        let mut data = Vec::with_capacity(pv.len());
                        for i in 0..g.rows() {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        emit(grads, p, Tensor::from_vec(pv.shape().to_vec(), data)?)?;
                    }
                    offset += w;
                }
            }
            Op::Mean(a) => {
                let av = val(*a);
                let gv = g.item() / av.len() as f64;
                emit(grads, *a, Tensor::full(av.shape(), gv))?;
            }
            Op::Sum(a) => {
                let av = val(*a);
                emit(grads, *a, Tensor::full(av.shape(), g.item()))?;
            }
            Op::CosineRows(p, z) => {
                let (pv, zv) = (val(*p), val(*z));
                let mut dp = Tensor::zeros(pv.shape());
                let mut dz = Tensor::zeros(zv.shape());
                for i in 0..pv.rows() {
                    let (pr, zr) = (pv.row(i), zv.row(i));
                    let np = pr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nz = zr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if np < COSINE_NORM_FLOOR || nz < COSINE_NORM_FLOOR {
                        continue;
                    }
                    let cos = node.value.data()[i];
                    let gi = g.data()[i];
                    let inv = 1.0 / (np * nz);
                    for (j, o) in dp.row_mut(i).iter_mut().enumerate() {
                        *o = gi * (zr[j] * inv - cos * pr[j] / (np * np));
                    }
                    for (j, o) in dz.row_mut(i).iter_mut().enumerate() {
                        *o = gi * (pr[j] * inv - cos * zr[j] / (nz * nz));
                    }
                }
                if wants(*p) {
                    emit(grads, *p, dp)?;
                }
                if wants(*z) {
                    emit(grads, *z, dz)?;
                }
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let scale = g.item() / targets.len() as f64;
                let mut out = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let row = out.row_mut(i);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                emit(grads, *logits, out)?;
            }
        }
        Ok(())
    }
}

fn emit(grads: &mut [Option<Tensor>], v: Var, t: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&t),
        slot @ None => {
            *slot = Some(t);
            Ok(())
        }
    }
}

/// The gradient slot of `v`, created as zeros if absent.
fn zeroed_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn column_sums(g: &Tensor, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &Tensor, causal: bool) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for i in 0..x.rows() {
        let visible = if causal { (i + 1).min(c) } else { c };
        let row = out.row_mut(i);
        let mx = row[..visible]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row[..visible].iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row[..visible].iter_mut() {
            *v /= s;
        }
        for v in row[visible..].iter_mut() {
            *v = 0.0;
        }
    }
    out
}
