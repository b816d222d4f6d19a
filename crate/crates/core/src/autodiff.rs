//! Reverse-mode automatic differentiation over dense [`Tensor`]s.
//!
//! A [`Graph`] is an append-only record of operations. Every operation
//! pushes one node whose parents were pushed before it, so creation order
//! is already a topological order and [`Graph::backward`] is a single
//! reverse sweep. Graphs are cheap and meant to be rebuilt every step.
//!
//! ```
//! use mpq_core::autodiff::Graph;
//! use mpq_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let a = g.leaf(Tensor::scalar(2.0), true);
//! let b = g.leaf(Tensor::scalar(3.0), true);
//! let c = g.add(a, b).unwrap();
//! g.backward(c).unwrap();
//! assert_eq!(g.grad(a).unwrap().data(), &[1.0]);
//! ```
//!
//! Broadcasting is limited to scalar-vs-tensor and equal shapes. Bias rows
//! go through the explicit [`Graph::add_row`] instead.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var),
    Unary(Elementwise, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    StraightThrough(Var),
    SliceCols {
        src: Var,
        start: usize,
        end: usize,
    },
    SliceRows {
        src: Var,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    AddRow(Var, Var),
    Element {
        src: Var,
        index: usize,
    },
    MeanRows(Var),
    LayerNormRows {
        src: Var,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds an input tensor. Only leaves with `requires_grad` start gradient
    /// tracking; every other node inherits it from its parents.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, absent when the node never received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }

    /// Dispatches one of the elementwise operations. Unary kinds ignore `rhs`.
    pub fn elementwise(&mut self, op: Elementwise, lhs: Var, rhs: Option<Var>) -> Result<Var> {
        match (op, rhs) {
            (Elementwise::Add | Elementwise::Sub | Elementwise::Mul, Some(r)) => {
                self.binary(op, lhs, r)
            }
            (Elementwise::Add | Elementwise::Sub | Elementwise::Mul, None) => Err(
                Error::Contract(format!("{op:?} needs two operands")),
            ),
            _ => self.unary(op, lhs),
        }
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = match op {
            Elementwise::Add => |x: f64, y: f64| x + y,
            Elementwise::Sub => |x: f64, y: f64| x - y,
            Elementwise::Mul => |x: f64, y: f64| x * y,
            _ => unreachable!("binary dispatch"),
        };
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.is_scalar() {
            let y = vb.data()[0];
            va.map(|x| f(x, y))
        } else if va.is_scalar() {
            let x = va.data()[0];
            vb.map(|y| f(x, y))
        } else {
            return Err(Error::dims("elementwise", va.shape(), vb.shape()));
        };
        let rg = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Result<Var> {
        let va = self.value(a);
        let value = match op {
            Elementwise::Relu => va.map(|x| x.max(0.0)),
            Elementwise::Exp => va.map(f64::exp),
            Elementwise::Log => {
                if let Some(bad) = va.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                va.map(f64::ln)
            }
            _ => unreachable!("unary dispatch"),
        };
        let rg = self.tracked(&[a]);
        Ok(self.push(value, Op::Unary(op, a), rg))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.tracked(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.tracked(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.tracked(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Row-wise softmax of a matrix, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2()?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(softmax(t.row(r)));
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (batch, classes) = t.dims2()?;
        if labels.len() != batch {
            return Err(Error::dims("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Index {
                    what: "class label",
                    index: y,
                    limit: classes,
                });
            }
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let probs = Tensor::new(vec![batch, classes], probs)?;
        let rg = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / batch as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Node that evaluates to `forward_value` but sends its incoming
    /// gradient unchanged to `passthrough` (straight-through estimator).
    pub fn straight_through(&mut self, forward_value: Tensor, passthrough: Var) -> Result<Var> {
        if forward_value.shape() != self.value(passthrough).shape() {
            return Err(Error::dims(
                "straight_through",
                forward_value.shape(),
                self.value(passthrough).shape(),
            ));
        }
        let rg = self.tracked(&[passthrough]);
        Ok(self.push(forward_value, Op::StraightThrough(passthrough), rg))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(src).slice_cols(start, end)?;
        let rg = self.tracked(&[src]);
        Ok(self.push(value, Op::SliceCols { src, start, end }, rg))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(src).slice_rows(start, end)?;
        let rg = self.tracked(&[src]);
        Ok(self.push(value, Op::SliceRows { src, start, end }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = crate::tensor::concat_cols(&tensors)?;
        let rg = self.tracked(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (_, cols) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2()?;
            if c != cols {
                return Err(Error::dims("concat_rows", self.value(*first).shape(), t.shape()));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.tracked(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.tracked(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.dims2()?;
        if tr.numel() != n {
            return Err(Error::dims("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (x, b) in data[r * n..(r + 1) * n].iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.tracked(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Selects one entry (flat row-major index) as a scalar node.
    pub fn element(&mut self, src: Var, index: usize) -> Result<Var> {
        let t = self.value(src);
        let x = *t.data().get(index).ok_or(Error::Index {
            what: "element",
            index,
            limit: t.numel(),
        })?;
        let rg = self.tracked(&[src]);
        Ok(self.push(Tensor::scalar(x), Op::Element { src, index }, rg))
    }

    /// Column means of a matrix as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.tracked(&[a]);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(a), rg))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        let mut data = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = t.row(r);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|x| (x - mu) * is));
        }
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(value, Op::LayerNormRows { src: a, inv_std }, rg))
    }

    /// Propagates d`loss`/d(node) to every tracked node upstream of `loss`
    /// and adds it to the stored gradients. A second call without
    /// [`Graph::zero_grad`] accumulates on top of the first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(upstream) = local[i].take() else {
                continue;
            };
            self.propagate(i, &upstream, &mut local)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(g) => g
                    .data_mut()
                    .iter_mut()
                    .zip(&upstream)
                    .for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), upstream)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, up: &[f64], local: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut local[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let dout = Tensor::new(node.value.shape().to_vec(), up.to_vec())?;
                if self.requires_grad(*a) {
                    send(*a, dout.matmul(&tb.transpose()?)?.into_data());
                }
                if self.requires_grad(*b) {
                    send(*b, ta.transpose()?.matmul(&dout)?.into_data());
                }
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let out_len = up.len();
                // Gradients w.r.t. each operand expanded to the output shape,
                // then reduced back if that operand was a broadcast scalar.
                let at = |t: &Tensor, k: usize| {
                    if t.numel() == out_len {
                        t.data()[k]
                    } else {
                        t.data()[0]
                    }
                };
                let (da, db): (Vec<f64>, Vec<f64>) = match op {
                    Elementwise::Add => (up.to_vec(), up.to_vec()),
                    Elementwise::Sub => (up.to_vec(), up.iter().map(|g| -g).collect()),
                    Elementwise::Mul => (0..out_len)
                        .map(|k| (up[k] * at(tb, k), up[k] * at(ta, k)))
                        .unzip(),
                    _ => unreachable!("binary op"),
                };
                let reduce = |t: &Tensor, d: Vec<f64>| {
                    if t.numel() == out_len {
                        d
                    } else {
                        vec![d.iter().sum()]
                    }
                };
                send(*a, reduce(ta, da));
                send(*b, reduce(tb, db));
            }
            Op::Unary(op, a) => {
                let ta = self.value(*a);
                let d = match op {
                    Elementwise::Relu => ta
                        .data()
                        .iter()
                        .zip(up)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    Elementwise::Exp => node.value.data().iter().zip(up).map(|(y, g)| y * g).collect(),
                    Elementwise::Log => ta.data().iter().zip(up).map(|(x, g)| g / x).collect(),
                    _ => unreachable!("unary op"),
                };
                send(*a, d);
            }
            Op::Scale(a, f) => send(*a, up.iter().map(|g| g * f).collect()),
            Op::Sum(a) => send(*a, vec![up[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![up[0] / n as f64; n]);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2()?;
                let y = node.value.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let s = r * n..(r + 1) * n;
                    let dot: f64 = y[s.clone()].iter().zip(&up[s.clone()]).map(|(p, g)| p * g).sum();
                    for k in s {
                        d[k] = y[k] * (up[k] - dot);
                    }
                }
                send(*a, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (batch, classes) = probs.dims2()?;
                let scale = up[0] / batch as f64;
                let mut d: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * classes + y] -= scale;
                }
                send(*logits, d);
            }
            Op::StraightThrough(src) => send(*src, up.to_vec()),
            Op::SliceCols { src, start, end } => {
                let (rows, cols) = self.value(*src).dims2()?;
                let w = end - start;
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + end].copy_from_slice(&up[r * w..(r + 1) * w]);
                }
                send(*src, d);
            }
            Op::SliceRows { src, start, end } => {
                let (rows, cols) = self.value(*src).dims2()?;
                let mut d = vec![0.0; rows * cols];
                d[start * cols..end * cols].copy_from_slice(up);
                send(*src, d);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&up[r * total + offset..r * total + offset + w]);
                    }
                    send(p, d);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(p, up[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2()?;
                let dout = Tensor::new(vec![r, c], up.to_vec())?;
                send(*a, dout.transpose()?.into_data());
            }
            Op::AddRow(a, row) => {
                send(*a, up.to_vec());
                let (m, n) = node.value.dims2()?;
                let mut d = vec![0.0; n];
                for r in 0..m {
                    d.iter_mut().zip(&up[r * n..(r + 1) * n]).for_each(|(a, g)| *a += g);
                }
                send(*row, d);
            }
            Op::Element { src, index } => {
                let mut d = vec![0.0; self.value(*src).numel()];
                d[*index] = up[0];
                send(*src, d);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(up.iter().map(|g| g / m as f64));
                }
                send(*a, d);
            }
            Op::LayerNormRows { src, inv_std } => {
                let (m, n) = node.value.dims2()?;
                let xhat = node.value.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let s = r * n..(r + 1) * n;
                    let g = &up[s.clone()];
                    let xh = &xhat[s.clone()];
                    let mean_g = g.iter().sum::<f64>() / n as f64;
                    let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for k in 0..n {
                        d[r * n + k] = inv_std[r] * (g[k] - mean_g - xh[k] * mean_gx);
                    }
                }
                send(*src, d);
            }
        }
        Ok(())
    }
}

/// Max-shifted softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
