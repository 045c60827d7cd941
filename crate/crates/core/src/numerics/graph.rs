//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Every op appends a node holding its output value and whatever the
//! backward pass needs. Node ids are assigned in insertion order, so the
//! reverse of insertion order is a valid reverse topological order.

use super::kernels::{self, gelu, gelu_grad, sum_f64};
use super::tensor::numel;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulBt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: S },
    AddConst { a: Var },
    Gelu { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<S>, count: usize },
    Sum { a: Var },
    GatherRows { src: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
    /// 64-bit value of reductions, before rounding to `S`.
    precise: Option<f64>,
}

impl<S> Node<S> {
    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }
}

/// A computation graph; see the module docs.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            precise: None,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf holding a copy of `t`; gradients flow to it iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf from raw parts.
    pub fn input(&mut self, shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, requires_grad))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold valid shapes")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    /// Scalar value of a one-element node in 64-bit; reductions report their
    /// accumulator before it was rounded to `S`.
    pub fn item_f64(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.precise.unwrap_or_else(|| n.value[0].to_f64c())
    }

    fn set_precise(&mut self, v: Var, value: f64) -> Var {
        self.nodes[v.0].precise = Some(value);
        v
    }

    /// Accumulated gradient of a leaf; `None` for frozen leaves, non-leaves,
    /// and leaves the last backward pass did not reach.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Ids and gradients of every leaf that holds one.
    pub fn leaf_grads(&self) -> impl Iterator<Item = (Var, &[S])> {
        self.leaf_grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (Var(i), g)))
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{what} expects a 2-D tensor, got {s:?}"))),
        }
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and {:?}: inner dimensions differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_bt of {:?} and {:?}ᵀ: inner dimensions differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_bt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulBt { a, b, m, k, n }, rg))
    }

    fn check_broadcast(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sb.len() < sa.len() && sa.ends_with(sb)) {
            Ok(())
        } else {
            Err(Error::Dimension(format!("{op}: cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    /// `a + b`, where `b` may broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "add")?;
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(bv.len())
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    /// Element-wise `a ⊙ b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "mul")?;
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(bv.len())
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x * y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, factor }, rg)
    }

    /// `a + c` for a constant `c` of the same size (attention masks).
    pub fn add_const(&mut self, a: Var, c: &[S]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Dimension(format!(
                "add_const: {} constants for shape {:?}",
                c.len(),
                self.shape(a)
            )));
        }
        let out = self.value(a).iter().zip(c).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddConst { a }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, S::tanh, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, S::exp, Op::Exp { a })
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Var {
        let node = self.node(a);
        let cols = node.cols();
        let mut out = Vec::with_capacity(node.value.len());
        for row in node.value.chunks(cols) {
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let start = out.len();
            out.extend(row.iter().map(|&x| (x - max).exp()));
            let total = sum_f64(&out[start..]);
            let inv = S::from_f64c(1.0 / total);
            out[start..].iter_mut().for_each(|y| *y *= inv);
        }
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.node(x).cols();
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            if self.shape(v) != [d] {
                return Err(Error::Dimension(format!(
                    "layer_norm {name} has shape {:?}, expected [{d}]",
                    self.shape(v)
                )));
            }
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(xs.len());
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(xs.len() / d);
        for row in xs.chunks(d) {
            let mean = sum_f64(row) / d as f64;
            let var = row
                .iter()
                .map(|v| (v.to_f64c() - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = S::from_f64c((v.to_f64c() - mean) * r);
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `logits[T,V]`, skipping
    /// positions labelled `ignore_index`. Returns 0 when every position is
    /// ignored.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[i64], ignore_index: i64) -> Result<Var> {
        let (t, v) = self.dims2(logits, "masked_cross_entropy")?;
        if labels.len() != t {
            return Err(Error::Dimension(format!(
                "{} labels for logits of shape {:?}",
                labels.len(),
                self.shape(logits)
            )));
        }
        let mut targets = Vec::with_capacity(t);
        for (pos, &l) in labels.iter().enumerate() {
            if l == ignore_index {
                targets.push(None);
            } else if (0..v as i64).contains(&l) {
                targets.push(Some(l as usize));
            } else {
                return Err(Error::Validation(format!(
                    "label {l} at position {pos} outside [0, {v})"
                )));
            }
        }
        let xs = self.value(logits);
        let mut probs = vec![S::zero(); t * v];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (pos, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            let row = &xs[pos * v..(pos + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64c()));
            let lse = max + row.iter().map(|x| (x.to_f64c() - max).exp()).sum::<f64>().ln();
            total += lse - row[target].to_f64c();
            count += 1;
            for (p, x) in probs[pos * v..(pos + 1) * v].iter_mut().zip(row) {
                *p = S::from_f64c((x.to_f64c() - lse).exp());
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[logits]);
        let out = self.push(
            vec![1],
            vec![S::from_f64c(loss)],
            Op::CrossEntropy { logits, targets, probs, count },
            rg,
        );
        Ok(self.set_precise(out, loss))
    }

    /// Sum of all elements (64-bit accumulation).
    pub fn sum(&mut self, a: Var) -> Var {
        let total = sum_f64(self.value(a));
        let rg = self.rg(&[a]);
        let out = self.push(vec![1], vec![S::from_f64c(total)], Op::Sum { a }, rg);
        self.set_precise(out, total)
    }

    /// Rows `idx` of `src[R,C]` (embedding lookup, interleaving).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(src, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!("gather_rows index {bad} out of {r} rows")));
        }
        if idx.is_empty() {
            return Err(Error::Dimension("gather_rows with no indices".into()));
        }
        let sv = self.value(src);
        let out = idx.iter().flat_map(|&i| sv[i * c..(i + 1) * c].iter().copied()).collect();
        let rg = self.rg(&[src]);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows { src, idx: idx.to_vec() }, rg))
    }

    /// Vertical concatenation of 2-D tensors sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat_rows of nothing".into()));
        };
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::Dimension(format!(
                    "concat_rows of {:?} and {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, c], out, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_rows")?;
        if start >= end || end > r {
            return Err(Error::Dimension(format!("slice_rows {start}..{end} of {r} rows")));
        }
        let out = self.value(a)[start * c..end * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![end - start, c], out, Op::SliceRows { a, start }, rg))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, c) = self.dims2(a, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Dimension(format!("slice_cols {start}..{end} of {c} columns")));
        }
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let rows = self.node(a).rows();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![rows, end - start], out, Op::SliceCols { a, start }, rg))
    }

    /// Horizontal concatenation of 2-D tensors sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat_cols of nothing".into()));
        };
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Dimension(format!(
                    "concat_cols of {:?} and {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[row * w..(row + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![r, total], out, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Back-propagates from a one-element `root`, adding into the gradient
    /// buffers of every reachable leaf that requires grad. Repeated calls
    /// accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let (lower, _) = grads.split_at_mut(i);
            backprop_node(&self.nodes, node, &g, lower);
        }
        Ok(())
    }
}

/// Gradient slot of `v`, allocated on first use; `None` when `v` needs no grad.
fn slot<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'a mut Vec<S>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n.value.len()]))
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = slot(nodes, grads, a) {
                kernels::matmul_bt_acc(g, val(b), da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, b) {
                kernels::matmul_at_acc(val(a), g, db, m, k, n);
            }
        }
        &Op::MatMulBt { a, b, m, k, n } => {
            if let Some(da) = slot(nodes, grads, a) {
                kernels::matmul_acc(g, val(b), da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, b) {
                kernels::matmul_at_acc(g, val(a), db, m, n, k);
            }
        }
        &Op::Add { a, b } => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(db) = slot(nodes, grads, b) {
                let w = db.len();
                for row in g.chunks(w) {
                    db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                }
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            let w = bv.len();
            if let Some(da) = slot(nodes, grads, a) {
                for (dr, gr) in da.chunks_mut(w).zip(g.chunks(w)) {
                    for ((d, &x), &y) in dr.iter_mut().zip(gr).zip(bv) {
                        *d += x * y;
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for (ar, gr) in av.chunks(w).zip(g.chunks(w)) {
                    for ((d, &x), &y) in db.iter_mut().zip(gr).zip(ar) {
                        *d += x * y;
                    }
                }
            }
        }
        &Op::Scale { a, factor } => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * factor);
            }
        }
        &Op::AddConst { a } => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        &Op::Gelu { a } => {
            let av = val(a);
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, &x), &gx) in da.iter_mut().zip(av).zip(g) {
                    *d += gx * gelu_grad(x);
                }
            }
        }
        &Op::Tanh { a } => {
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, &y), &gx) in da.iter_mut().zip(&node.value).zip(g) {
                    *d += gx * (S::one() - y * y);
                }
            }
        }
        &Op::Exp { a } => {
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, &y), &gx) in da.iter_mut().zip(&node.value).zip(g) {
                    *d += gx * y;
                }
            }
        }
        &Op::Softmax { a } => {
            let cols = node.cols();
            if let Some(da) = slot(nodes, grads, a) {
                for ((dr, yr), gr) in da.chunks_mut(cols).zip(node.value.chunks(cols)).zip(g.chunks(cols)) {
                    let s = S::from_f64c(
                        yr.iter().zip(gr).map(|(y, x)| y.to_f64c() * x.to_f64c()).sum::<f64>(),
                    );
                    for ((d, &y), &x) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += y * (x - s);
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = node.cols();
            let gv = val(*gain);
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (hr, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                    for ((acc, &h), &x) in dg.iter_mut().zip(hr).zip(gr) {
                        *acc += h * x;
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for gr in g.chunks(d) {
                    db.iter_mut().zip(gr).for_each(|(acc, &x)| *acc += x);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                for (r, ((dr, hr), gr)) in dx.chunks_mut(d).zip(xhat.chunks(d)).zip(g.chunks(d)).enumerate() {
                    let mut mean_dh = 0.0f64;
                    let mut mean_dh_h = 0.0f64;
                    for j in 0..d {
                        let dh = (gr[j] * gv[j]).to_f64c();
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j].to_f64c();
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = (gr[j] * gv[j]).to_f64c();
                        dr[j] += S::from_f64c(rstd[r] * (dh - mean_dh - hr[j].to_f64c() * mean_dh_h));
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs, count } => {
            if *count == 0 {
                // Still allocate so the zero gradient is observable.
                let _ = slot(nodes, grads, *logits);
                return;
            }
            let v = probs.len() / targets.len();
            let scale = g[0] / S::from_f64c(*count as f64);
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (pos, target) in targets.iter().enumerate() {
                    let Some(target) = *target else { continue };
                    let row = &mut dl[pos * v..(pos + 1) * v];
                    for (d, &p) in row.iter_mut().zip(&probs[pos * v..(pos + 1) * v]) {
                        *d += p * scale;
                    }
                    row[target] -= scale;
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::GatherRows { src, idx } => {
            let c = node.cols();
            if let Some(ds) = slot(nodes, grads, *src) {
                for (&i, gr) in idx.iter().zip(g.chunks(c)) {
                    ds[i * c..(i + 1) * c].iter_mut().zip(gr).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                if let Some(dp) = slot(nodes, grads, p) {
                    dp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, &x)| *d += x);
                }
                offset += len;
            }
        }
        &Op::SliceRows { a, start } => {
            let c = node.cols();
            if let Some(da) = slot(nodes, grads, a) {
                da[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &x)| *d += x);
            }
        }
        &Op::SliceCols { a, start } => {
            let w = node.cols();
            let c = nodes[a.0].cols();
            if let Some(da) = slot(nodes, grads, a) {
                for (dr, gr) in da.chunks_mut(c).zip(g.chunks(w)) {
                    dr[start..start + w].iter_mut().zip(gr).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::ConcatCols { parts } => {
            let total = node.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p.0].cols();
                if let Some(dp) = slot(nodes, grads, p) {
                    for (dr, gr) in dp.chunks_mut(w).zip(g.chunks(total)) {
                        dr.iter_mut().zip(&gr[offset..offset + w]).for_each(|(d, &x)| *d += x);
                    }
                }
                offset += w;
            }
        }
    }
}
