// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive eagerly as it is built (define-by-run).
//! The recorded tape supports two sweeps:
//!
//! - [`Graph::tangents`]: forward mode. Tangents are pushed from seeded leaves
//!   through the tape in recording order, giving Jacobian-vector products
//!   without forming any Jacobian. One recorded forward pass can be reused for
//!   many probe directions.
//! - [`Graph::backward`]: reverse mode, used for training and for gradient
//!   attribution.
//!
//! Registered primitives: matmul, transpose, add, sub, mul, row-broadcast add,
//! column gating, scaling, ReLU, (causal) row softmax, layer norm, embedding
//! lookup, mean pooling, column slicing/concatenation, repeat, and token
//! cross-entropy. Anything recorded through [`Graph::opaque`] can be evaluated
//! but not differentiated.
//!
//! ReLU uses derivative 0 at exactly 0.

use crate::error::{Error, Result};
use crate::tensor::{matmul_at_acc, matmul_bt_acc, Tensor};

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Leaf {
    /// Differentiable input (e.g. embedding activations).
    Input,
    /// Trainable parameter.
    Param,
    /// Held fixed; never receives gradients or tangents.
    Const,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(Leaf),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCols(NodeId, NodeId),
    Scale(NodeId, f32),
    Relu(NodeId),
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    MeanRows(NodeId),
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    RepeatEach { x: NodeId, times: usize },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>> },
    Opaque { name: String, x: NodeId },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Depends on at least one `Input` or `Param` leaf.
    tracked: bool,
}

/// Primal value together with its tangent.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(Error::Dimension(format!(
                "dual tensor: primal {:?} vs tangent {:?}",
                primal.shape(),
                tangent.shape()
            )));
        }
        Ok(Self { primal, tangent })
    }
}

#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.0.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn acc(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f32])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

fn dim_err(op: &str, msg: String) -> Error {
    Error::Dimension(format!("{op}: {msg}"))
}

/// Row-wise layer-norm statistics: (normalized values, 1/sigma per row).
fn ln_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (r, c) = (x.rows(), x.cols());
    let mut xhat = vec![0.0; r * c];
    let mut rstd = vec![0.0; r];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = rs;
        for j in 0..c {
            xhat[i * c + j] = (row[j] - mean) * rs;
        }
    }
    (xhat, rstd)
}

fn softmax_rows(x: &Tensor, causal: bool) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let lim = if causal { (i + 1).min(c) } else { c };
        let m = row[..lim].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0;
        for j in 0..lim {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            s += e;
        }
        for v in &mut out[i * c..i * c + lim] {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax of finite input is finite")
}

fn log_softmax_row(row: &[f32]) -> Vec<f32> {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = row.iter().map(|v| (v - m).exp()).sum::<f32>().ln() + m;
    row.iter().map(|v| v - lse).collect()
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

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, kind: Leaf, value: Tensor) -> NodeId {
        self.push(Op::Leaf(kind), value, kind != Leaf::Const)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(Leaf::Input, value)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(Leaf::Param, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(Leaf::Const, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, t))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).ndim() != 2 {
            return Err(dim_err("transpose", "needs a matrix".into()));
        }
        let v = self.value(a).transpose();
        let t = self.tracked(&[a]);
        Ok(self.push(Op::Transpose(a), v, t))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, t))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, t))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, t))
    }

    /// `a[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.len() != x.cols() {
            return Err(dim_err(
                "add_row",
                format!("{:?} + {:?}", x.shape(), b.shape()),
            ));
        }
        let mut v = x.clone();
        let c = x.cols();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += b.data()[i % c];
        }
        let t = self.tracked(&[a, bias]);
        Ok(self.push(Op::AddRow(a, bias), v, t))
    }

    /// `a[m,n] * g[n]` scaling each column.
    pub fn mul_cols(&mut self, a: NodeId, gate: NodeId) -> Result<NodeId> {
        let (x, g) = (self.value(a), self.value(gate));
        if g.len() != x.cols() {
            return Err(dim_err(
                "mul_cols",
                format!("{:?} * {:?}", x.shape(), g.shape()),
            ));
        }
        let mut v = x.clone();
        let c = x.cols();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e *= g.data()[i % c];
        }
        let t = self.tracked(&[a, gate]);
        Ok(self.push(Op::MulCols(a, gate), v, t))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let v = self.value(a).scale(c);
        let t = self.tracked(&[a]);
        Ok(self.push(Op::Scale(a, c), v, t))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        let t = self.tracked(&[a]);
        Ok(self.push(Op::Relu(a), v, t))
    }

    /// Row softmax. With `causal`, row `i` only covers columns `0..=i` and the
    /// masked entries are exactly zero.
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> Result<NodeId> {
        let x = self.value(a);
        if causal && x.ndim() == 2 && x.rows() > x.cols() {
            return Err(dim_err("softmax", "causal mask needs rows <= cols".into()));
        }
        let v = softmax_rows(x, causal);
        let t = self.tracked(&[a]);
        Ok(self.push(Op::Softmax { x: a }, v, t))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(dim_err("layer_norm", format!("width {c} vs gain/bias")));
        }
        let (xhat, _) = ln_stats(xv);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % c] + b[i % c])
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        let t = self.tracked(&[x, gain, bias]);
        Ok(self.push(Op::LayerNorm { x, gain, bias }, v, t))
    }

    /// Rows of `table` selected by `ids`: `[vocab, d] -> [ids.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = self
            .value(table)
            .select_rows(ids)
            .map_err(|e| Error::Input(format!("embedding lookup: {e}")))?;
        let t = self.tracked(&[table]);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            v,
            t,
        ))
    }

    /// Mean over rows: `[r, c] -> [c]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).mean_rows();
        let t = self.tracked(&[a]);
        Ok(self.push(Op::MeanRows(a), v, t))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start + len > x.cols() || x.ndim() != 2 {
            return Err(dim_err(
                "slice_cols",
                format!("{start}..{} of {:?}", start + len, x.shape()),
            ));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let v = x.select_cols(&idx)?;
        let t = self.tracked(&[a]);
        Ok(self.push(Op::SliceCols { x: a, start, len }, v, t))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| dim_err("concat_cols", "no parts".into()))?;
        if parts
            .iter()
            .any(|&p| self.value(p).rows() != rows || self.value(p).ndim() != 2)
        {
            return Err(dim_err("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![rows, total], data)?;
        let t = self.tracked(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, t))
    }

    /// `[n] -> [n * times]`, each entry repeated `times` times in place.
    pub fn repeat_each(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let x = self.value(a);
        let data: Vec<f32> = x
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let v = Tensor::from_vec(data);
        let t = self.tracked(&[a]);
        Ok(self.push(Op::RepeatEach { x: a, times }, v, t))
    }

    /// Mean token negative log-likelihood over positions with a target.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let l = self.value(logits);
        if l.rows() != targets.len() {
            return Err(dim_err(
                "cross_entropy",
                format!("{} rows vs {} targets", l.rows(), targets.len()),
            ));
        }
        let n = targets.iter().filter(|t| t.is_some()).count();
        if n == 0 {
            return Err(Error::Input("cross_entropy: no target positions".into()));
        }
        let mut total = 0.0f32;
        for (i, tgt) in targets.iter().enumerate() {
            if let Some(y) = *tgt {
                if y >= l.cols() {
                    return Err(Error::Input(format!("target {y} outside vocab {}", l.cols())));
                }
                total -= log_softmax_row(l.row(i))[y];
            }
        }
        let v = Tensor::new(vec![1], vec![total / n as f32])?;
        let t = self.tracked(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            v,
            t,
        ))
    }

    /// Record an elementwise function with no registered derivative.
    /// Differentiating through it yields [`Error::UnsupportedOp`].
    pub fn opaque(&mut self, name: &str, a: NodeId, f: impl Fn(f32) -> f32) -> Result<NodeId> {
        let v = self.value(a).map(f);
        v.ensure_finite(name)?;
        let t = self.tracked(&[a]);
        Ok(self.push(
            Op::Opaque {
                name: name.to_string(),
                x: a,
            },
            v,
            t,
        ))
    }

    /// Forward-mode sweep. `seeds` assigns tangents to leaves; everything else
    /// starts at zero. Returns the tangent of `target`.
    pub fn tangent_of(&self, seeds: &[(NodeId, &Tensor)], target: NodeId) -> Result<Tensor> {
        let tans = self.tangents_upto(seeds, target.0 + 1)?;
        Ok(tans
            .into_iter()
            .nth(target.0)
            .flatten()
            .unwrap_or_else(|| Tensor::zeros(self.value(target).shape())))
    }

    /// Tangents for every node (`None` meaning identically zero).
    pub fn tangents(&self, seeds: &[(NodeId, &Tensor)]) -> Result<Vec<Option<Tensor>>> {
        self.tangents_upto(seeds, self.nodes.len())
    }

    fn tangents_upto(
        &self,
        seeds: &[(NodeId, &Tensor)],
        end: usize,
    ) -> Result<Vec<Option<Tensor>>> {
        let mut tan: Vec<Option<Tensor>> = vec![None; end];
        for &(id, t) in seeds {
            let node = &self.nodes[id.0];
            if !matches!(node.op, Op::Leaf(Leaf::Input | Leaf::Param)) {
                return Err(Error::Input("tangent seeds must be input or param leaves".into()));
            }
            if t.shape() != node.value.shape() {
                return Err(dim_err(
                    "tangent seed",
                    format!("{:?} vs leaf {:?}", t.shape(), node.value.shape()),
                ));
            }
            if id.0 < end {
                tan[id.0] = Some(t.clone());
            }
        }
        for i in 0..end {
            if tan[i].is_some() || !self.nodes[i].tracked {
                continue;
            }
            let out = self.tangent_rule(i, &tan)?;
            tan[i] = out;
        }
        Ok(tan)
    }

    fn tangent_rule(&self, i: usize, tan: &[Option<Tensor>]) -> Result<Option<Tensor>> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let tg = |id: NodeId| tan[id.0].as_ref();
        let shape = node.value.shape();
        let out = match &node.op {
            Op::Leaf(_) => None,
            Op::MatMul(a, b) => {
                let (ta, tb) = (tg(*a), tg(*b));
                if ta.is_none() && tb.is_none() {
                    return Ok(None);
                }
                let mut out = Tensor::zeros(shape);
                if let Some(ta) = ta {
                    out = ta.matmul(val(*b))?;
                }
                if let Some(tb) = tb {
                    let part = val(*a).matmul(tb)?;
                    out.axpy(1.0, &part)?;
                }
                Some(out)
            }
            Op::Transpose(a) => tg(*a).map(Tensor::transpose),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
                match (tg(*a), tg(*b)) {
                    (None, None) => None,
                    (ta, tb) => {
                        let mut out = ta.cloned().unwrap_or_else(|| Tensor::zeros(shape));
                        if let Some(tb) = tb {
                            out.axpy(sign, tb)?;
                        }
                        Some(out)
                    }
                }
            }
            Op::Mul(a, b) => {
                let mut out = Tensor::zeros(shape);
                if let Some(ta) = tg(*a) {
                    out.axpy(1.0, &ta.mul(val(*b))?)?;
                }
                if let Some(tb) = tg(*b) {
                    out.axpy(1.0, &val(*a).mul(tb)?)?;
                }
                Some(out)
            }
            Op::AddRow(a, bias) => {
                let mut out = tg(*a).cloned().unwrap_or_else(|| Tensor::zeros(shape));
                if let Some(tb) = tg(*bias) {
                    let c = out.cols();
                    for (k, e) in out.data_mut().iter_mut().enumerate() {
                        *e += tb.data()[k % c];
                    }
                }
                Some(out)
            }
            Op::MulCols(a, g) => {
                let c = node.value.cols();
                let mut out = Tensor::zeros(shape);
                if let Some(ta) = tg(*a) {
                    let gv = val(*g).data();
                    for (k, e) in out.data_mut().iter_mut().enumerate() {
                        *e += ta.data()[k] * gv[k % c];
                    }
                }
                if let Some(tgate) = tg(*g) {
                    let av = val(*a).data();
                    for (k, e) in out.data_mut().iter_mut().enumerate() {
                        *e += av[k] * tgate.data()[k % c];
                    }
                }
                Some(out)
            }
            Op::Scale(a, c) => tg(*a).map(|t| t.scale(*c)),
            Op::Relu(a) => tg(*a)
                .map(|t| t.zip_with(val(*a), "relu", |d, x| if x > 0.0 { d } else { 0.0 }))
                .transpose()?,
            Op::Softmax { x, .. } => tg(*x).map(|t| {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut out = vec![0.0; r * c];
                for row in 0..r {
                    let yr = y.row(row);
                    let tr = t.row(row);
                    let dot: f32 = yr.iter().zip(tr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[row * c + j] = yr[j] * (tr[j] - dot);
                    }
                }
                Tensor::new(shape.to_vec(), out)
            })
            .transpose()?,
            Op::LayerNorm { x, gain, bias } => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let (xhat, rstd) = ln_stats(xv);
                let g = val(*gain).data();
                let mut out = vec![0.0; r * c];
                if let Some(tx) = tg(*x) {
                    for i in 0..r {
                        let tr = tx.row(i);
                        let hr = &xhat[i * c..(i + 1) * c];
                        let m1 = tr.iter().sum::<f32>() / c as f32;
                        let m2 = tr.iter().zip(hr).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                        for j in 0..c {
                            out[i * c + j] = g[j] * rstd[i] * (tr[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(tgn) = tg(*gain) {
                    for (k, o) in out.iter_mut().enumerate() {
                        *o += xhat[k] * tgn.data()[k % c];
                    }
                }
                if let Some(tb) = tg(*bias) {
                    for (k, o) in out.iter_mut().enumerate() {
                        *o += tb.data()[k % c];
                    }
                }
                Some(Tensor::new(shape.to_vec(), out)?)
            }
            Op::Embedding { table, ids } => tg(*table).map(|t| t.select_rows(ids)).transpose()?,
            Op::MeanRows(a) => tg(*a).map(Tensor::mean_rows),
            Op::SliceCols { x, start, len } => tg(*x)
                .map(|t| t.select_cols(&(*start..start + len).collect::<Vec<_>>()))
                .transpose()?,
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let mut data = Vec::with_capacity(node.value.len());
                for i in 0..rows {
                    for &p in parts {
                        match tg(p) {
                            Some(t) => data.extend_from_slice(t.row(i)),
                            None => data.extend(std::iter::repeat_n(0.0, val(p).cols())),
                        }
                    }
                }
                Some(Tensor::new(shape.to_vec(), data)?)
            }
            Op::RepeatEach { x, times } => tg(*x).map(|t| {
                Tensor::from_vec(
                    t.data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v, *times))
                        .collect(),
                )
            }),
            Op::CrossEntropy { logits, targets } => match tg(*logits) {
                None => None,
                Some(t) => {
                    let l = val(*logits);
                    let n = targets.iter().filter(|t| t.is_some()).count() as f32;
                    let mut d = 0.0f32;
                    for (i, tgt) in targets.iter().enumerate() {
                        if let Some(y) = *tgt {
                            let lp = log_softmax_row(l.row(i));
                            let tr = t.row(i);
                            for (j, &lpj) in lp.iter().enumerate() {
                                let p = lpj.exp();
                                d += (p - if j == y { 1.0 } else { 0.0 }) * tr[j];
                            }
                        }
                    }
                    Some(Tensor::new(vec![1], vec![d / n])?)
                }
            },
            Op::Opaque { name, x } => {
                if tg(*x).is_some() {
                    return Err(Error::UnsupportedOp(name.clone()));
                }
                None
            }
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Input("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_rule(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn backward_rule(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].tracked;
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    acc(&mut grads[a.0], av.shape(), |d| {
                        matmul_bt_acc(g.data(), bv.data(), d, m, n, k)
                    });
                }
                if wants(*b) {
                    acc(&mut grads[b.0], bv.shape(), |d| {
                        matmul_at_acc(av.data(), g.data(), d, m, k, n)
                    });
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let gt = g.transpose();
                    acc(&mut grads[a.0], val(*a).shape(), |d| {
                        d.iter_mut().zip(gt.data()).for_each(|(x, y)| *x += y)
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
                if wants(*a) {
                    acc(&mut grads[a.0], g.shape(), |d| {
                        d.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y)
                    });
                }
                if wants(*b) {
                    acc(&mut grads[b.0], g.shape(), |d| {
                        d.iter_mut().zip(g.data()).for_each(|(x, y)| *x += sign * y)
                    });
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).data();
                    acc(&mut grads[a.0], g.shape(), |d| {
                        for (k, x) in d.iter_mut().enumerate() {
                            *x += g.data()[k] * bv[k];
                        }
                    });
                }
                if wants(*b) {
                    let av = val(*a).data();
                    acc(&mut grads[b.0], g.shape(), |d| {
                        for (k, x) in d.iter_mut().enumerate() {
                            *x += g.data()[k] * av[k];
                        }
                    });
                }
            }
            Op::AddRow(a, bias) => {
                if wants(*a) {
                    acc(&mut grads[a.0], g.shape(), |d| {
                        d.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y)
                    });
                }
                if wants(*bias) {
                    let c = g.cols();
                    acc(&mut grads[bias.0], val(*bias).shape(), |d| {
                        for (k, y) in g.data().iter().enumerate() {
                            d[k % c] += y;
                        }
                    });
                }
            }
            Op::MulCols(a, gate) => {
                let c = g.cols();
                if wants(*a) {
                    let gv = val(*gate).data();
                    acc(&mut grads[a.0], g.shape(), |d| {
                        for (k, x) in d.iter_mut().enumerate() {
                            *x += g.data()[k] * gv[k % c];
                        }
                    });
                }
                if wants(*gate) {
                    let av = val(*a).data();
                    acc(&mut grads[gate.0], val(*gate).shape(), |d| {
                        for (k, y) in g.data().iter().enumerate() {
                            d[k % c] += y * av[k];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    acc(&mut grads[a.0], g.shape(), |d| {
                        d.iter_mut().zip(g.data()).for_each(|(x, y)| *x += c * y)
                    });
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let xv = val(*a).data();
                    acc(&mut grads[a.0], g.shape(), |d| {
                        for (k, x) in d.iter_mut().enumerate() {
                            if xv[k] > 0.0 {
                                *x += g.data()[k];
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, .. } => {
                if wants(*x) {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    acc(&mut grads[x.0], g.shape(), |d| {
                        for row in 0..r {
                            let yr = y.row(row);
                            let gr = g.row(row);
                            let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                d[row * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let (xhat, rstd) = ln_stats(xv);
                let gn = val(*gain).data();
                if wants(*x) {
                    acc(&mut grads[x.0], xv.shape(), |d| {
                        for i in 0..r {
                            let gr = g.row(i);
                            let hr = &xhat[i * c..(i + 1) * c];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                let dh = gr[j] * gn[j];
                                m1 += dh;
                                m2 += dh * hr[j];
                            }
                            m1 /= c as f32;
                            m2 /= c as f32;
                            for j in 0..c {
                                let dh = gr[j] * gn[j];
                                d[i * c + j] += rstd[i] * (dh - m1 - hr[j] * m2);
                            }
                        }
                    });
                }
                if wants(*gain) {
                    acc(&mut grads[gain.0], val(*gain).shape(), |d| {
                        for (k, y) in g.data().iter().enumerate() {
                            d[k % c] += y * xhat[k];
                        }
                    });
                }
                if wants(*bias) {
                    acc(&mut grads[bias.0], val(*bias).shape(), |d| {
                        for (k, y) in g.data().iter().enumerate() {
                            d[k % c] += y;
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let c = g.cols();
                    acc(&mut grads[table.0], val(*table).shape(), |d| {
                        for (t, &id) in ids.iter().enumerate() {
                            for j in 0..c {
                                d[id * c + j] += g.data()[t * c + j];
                            }
                        }
                    });
                }
            }
            Op::MeanRows(a) => {
                if wants(*a) {
                    let av = val(*a);
                    let (r, c) = (av.rows(), av.cols());
                    let inv = 1.0 / r as f32;
                    acc(&mut grads[a.0], av.shape(), |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g.data()[j] * inv;
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start, len } => {
                if wants(*x) {
                    let xv = val(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    acc(&mut grads[x.0], xv.shape(), |d| {
                        for i in 0..r {
                            for j in 0..*len {
                                d[i * c + start + j] += g.data()[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if wants(p) {
                        acc(&mut grads[p.0], val(p).shape(), |d| {
                            for i in 0..r {
                                for j in 0..pc {
                                    d[i * pc + j] += g.data()[i * total + off + j];
                                }
                            }
                        });
                    }
                    off += pc;
                }
            }
            Op::RepeatEach { x, times } => {
                if wants(*x) {
                    acc(&mut grads[x.0], val(*x).shape(), |d| {
                        for (k, y) in g.data().iter().enumerate() {
                            d[k / times] += y;
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if wants(*logits) {
                    let l = val(*logits);
                    let c = l.cols();
                    let n = targets.iter().filter(|t| t.is_some()).count() as f32;
                    let scale = g.data()[0] / n;
                    acc(&mut grads[logits.0], l.shape(), |d| {
                        for (i, tgt) in targets.iter().enumerate() {
                            if let Some(y) = *tgt {
                                let lp = log_softmax_row(l.row(i));
                                for (j, &lpj) in lp.iter().enumerate() {
                                    let p = lpj.exp();
                                    d[i * c + j] +=
                                        scale * (p - if j == y { 1.0 } else { 0.0 });
                                }
                            }
                        }
                    });
                }
            }
            Op::Opaque { name, x } => {
                if wants(*x) {
                    return Err(Error::UnsupportedOp(name.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Jacobian-vector product of a program built by `f` on a single input.
///
/// `f` receives the graph and the input node and returns the output node.
pub fn jvp<F>(f: F, x: &Tensor, v: &Tensor) -> Result<DualTensor>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
{
    if x.shape() != v.shape() {
        return Err(Error::Dimension(format!(
            "jvp: direction {:?} vs input {:?}",
            v.shape(),
            x.shape()
        )));
    }
    let mut g = Graph::new();
    let input = g.input(x.clone());
    let out = f(&mut g, input)?;
    let tangent = g.tangent_of(&[(input, v)], out)?;
    DualTensor::new(g.value(out).clone(), tangent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn identity_jvp_returns_direction() {
        let mut rng = RngStream::new(0);
        let x = rng.uniform(&[3, 4], -1.0, 1.0);
        let v = rng.uniform(&[3, 4], -1.0, 1.0);
        let d = jvp(|_, id| Ok(id), &x, &v).unwrap();
        assert_eq!(d.tangent, v);
        assert_eq!(d.primal, x);
    }

    #[test]
    fn square_derivative() {
        let x = Tensor::from_vec(vec![3.0]);
        let v = Tensor::from_vec(vec![1.0]);
        let d = jvp(|g, id| g.mul(id, id), &x, &v).unwrap();
        assert_eq!(d.primal.data(), &[9.0]);
        assert_eq!(d.tangent.data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::from_vec(vec![0.0, 1.0, -1.0]);
        let v = Tensor::from_vec(vec![1.0, 1.0, 1.0]);
        let d = jvp(|g, id| g.relu(id), &x, &v).unwrap();
        assert_eq!(d.tangent.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn opaque_op_is_rejected() {
        let x = Tensor::from_vec(vec![0.5]);
        let v = Tensor::from_vec(vec![1.0]);
        let err = jvp(|g, id| g.opaque("round", id, f32::round), &x, &v).unwrap_err();
        assert!(matches!(err, Error::UnsupportedOp(name) if name == "round"));
    }

    #[test]
    fn zero_tangent_gives_zero_output() {
        let mut rng = RngStream::new(2);
        let x = rng.uniform(&[2, 3], -1.0, 1.0);
        let v = Tensor::zeros(&[2, 3]);
        let d = jvp(
            |g, id| {
                let s = g.softmax(id, false)?;
                g.mean_rows(s)
            },
            &x,
            &v,
        )
        .unwrap();
        assert!(d.tangent.data().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![1.0, 2.0]]));
        let y = g.softmax(x, true).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0]);
        assert!((v.row(1).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn backward_of_matmul_sum() {
        // loss = sum(A B) via cross-check with mean_rows and a ones target
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let b = g.param(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn dual_tensor_shape_check() {
        assert!(DualTensor::new(Tensor::zeros(&[2]), Tensor::zeros(&[3])).is_err());
    }
}
