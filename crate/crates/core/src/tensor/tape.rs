use super::kernels::{matmul_into, sigmoid, transpose2};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Harden(Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Max(Var, Option<usize>),
    L2Normalize(Var, f64),
    LogSumExp(Var, Option<Vec<bool>>),
    CrossEntropy { logits: Var, mask: Option<Vec<bool>>, targets: Vec<(usize, usize)> },
    Reshape(Var, Vec<usize>),
    Transpose(Var),
    BroadcastRows(Var, usize),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Gather(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Clamp(..) => "clamp",
            Op::Harden(..) => "harden",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Max(..) => "max",
            Op::L2Normalize(..) => "l2_normalize",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRows(..) => "select_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Gather(..) => "gather",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ConcatRows(parts) => parts.clone(),
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Clamp(x, ..)
            | Op::Harden(x)
            | Op::Sum(x, _)
            | Op::Mean(x, _)
            | Op::Max(x, _)
            | Op::L2Normalize(x, _)
            | Op::LogSumExp(x, _)
            | Op::CrossEntropy { logits: x, .. }
            | Op::Reshape(x, _)
            | Op::Transpose(x)
            | Op::BroadcastRows(x, _)
            | Op::SelectRows(x, _)
            | Op::SliceCols(x, ..)
            | Op::Gather(x, _) => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    // Accumulated gradient; only leaves with requires_grad carry one.
    grad: Option<Tensor>,
}

/// Ordered record of operations. Nodes are appended in evaluation order, so
/// the inputs of every node precede it.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => Vec::new(),
        Some(a) => {
            let mut s = shape.to_vec();
            s.remove(a);
            s
        }
    }
}

fn check_axis(x: &Tensor, axis: Option<usize>) -> Result<()> {
    match axis {
        Some(a) if a >= x.rank() => Err(Error::Dimension(format!(
            "axis {a} out of range for shape {:?}",
            x.shape()
        ))),
        _ => Ok(()),
    }
}

/// Calls `f(out_index, slice_positions)` for every reduction group.
fn for_each_group(shape: &[usize], axis: Option<usize>, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>)) {
    match axis {
        None => {
            let n: usize = shape.iter().product();
            f(0, &mut (0..n));
        }
        Some(a) => {
            let (outer, n, inner) = axis_split(shape, a);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    f(o * inner + i, &mut (0..n).map(move |j| base + j * inner));
                }
            }
        }
    }
}

fn last_dim(x: &Tensor, op: &str) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::Dimension(format!("{op} needs rank >= 1")))
}

fn check_mask(mask: &Option<Vec<bool>>, x: &Tensor, cols: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::Dimension(format!(
                "mask of length {} for tensor of {} values",
                m.len(),
                x.len()
            )));
        }
        if m.chunks(cols).any(|row| !row.iter().any(|&b| b)) {
            return Err(Error::Contract("mask excludes every entry of a row".into()));
        }
    }
    Ok(())
}

/// Row maximum and `Σ exp(x - max)` over the masked entries of one row.
fn row_shifted_sum(row: &[f64], mask: Option<&[bool]>) -> (f64, f64) {
    let included = |k: usize| mask.is_none_or(|m| m[k]);
    let mut max = f64::NEG_INFINITY;
    for (k, &v) in row.iter().enumerate() {
        if included(k) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (k, &v) in row.iter().enumerate() {
        if included(k) {
            sum += (v - max).exp();
        }
    }
    (max, sum)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros_like(&value));
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a rank-0 node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Overwrites a leaf value; call [`Tape::replay`] to refresh downstream nodes.
    pub fn set_leaf(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("set_leaf on a non-leaf node".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "set_leaf shape {:?} != {:?}",
                value.shape(),
                node.value.shape()
            )));
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every non-leaf value in recording order from current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let out = self.eval_unchecked(op)?;
        if !out.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        Ok(out)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.shape().to_vec(), data)
        } else if x.is_scalar() {
            let s = x.data()[0];
            Ok(y.map(|q| f(s, q)))
        } else if y.is_scalar() {
            let s = y.data()[0];
            Ok(x.map(|p| f(p, s)))
        } else {
            Err(Error::Dimension(format!(
                "elementwise shapes {:?} and {:?} differ",
                x.shape(),
                y.shape()
            )))
        }
    }

    fn eval_unchecked(&self, op: &Op) -> Result<Tensor> {
        match op {
            Op::Leaf => unreachable!("leaves are never evaluated"),
            Op::MatMul(a, b) => self.value(*a).matmul(self.value(*b)),
            Op::Add(a, b) => self.binary(*a, *b, |p, q| p + q),
            Op::Sub(a, b) => self.binary(*a, *b, |p, q| p - q),
            Op::Mul(a, b) => self.binary(*a, *b, |p, q| p * q),
            Op::Neg(x) => Ok(self.value(*x).map(|v| -v)),
            Op::Scale(x, c) => Ok(self.value(*x).map(|v| v * c)),
            Op::Exp(x) => Ok(self.value(*x).map(f64::exp)),
            Op::Log(x) => {
                let t = self.value(*x);
                if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                Ok(t.map(f64::ln))
            }
            Op::Sigmoid(x) => Ok(self.value(*x).map(sigmoid)),
            Op::Relu(x) => Ok(self.value(*x).map(|v| if v > 0.0 { v } else { 0.0 })),
            Op::Clamp(x, lo, hi) => Ok(self.value(*x).map(|v| v.clamp(*lo, *hi))),
            Op::Harden(x) => Ok(self.value(*x).map(|v| if v >= 0.5 { 1.0 } else { 0.0 })),
            Op::Sum(x, axis) | Op::Mean(x, axis) | Op::Max(x, axis) => {
                let t = self.value(*x);
                check_axis(t, *axis)?;
                let shape = reduced_shape(t.shape(), *axis);
                let mut out = vec![0.0; shape.iter().product()];
                let d = t.data();
                for_each_group(t.shape(), *axis, |o, idx| {
                    out[o] = match op {
                        Op::Sum(..) => idx.map(|i| d[i]).sum(),
                        Op::Mean(..) => {
                            // Shifted mean: exact for constant inputs.
                            let mut first = None;
                            let mut count = 0usize;
                            let mut dev = 0.0;
                            for i in idx {
                                let base = *first.get_or_insert(d[i]);
                                dev += d[i] - base;
                                count += 1;
                            }
                            first.unwrap_or(0.0) + dev / count as f64
                        }
                        _ => idx.map(|i| d[i]).fold(f64::NEG_INFINITY, f64::max),
                    };
                });
                Tensor::new(shape, out)
            }
            Op::L2Normalize(x, eps) => {
                let t = self.value(*x);
                let cols = last_dim(t, "l2_normalize")?;
                let mut out = t.data().to_vec();
                for row in out.chunks_mut(cols) {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let denom = norm.max(*eps);
                    row.iter_mut().for_each(|v| *v /= denom);
                }
                Tensor::new(t.shape().to_vec(), out)
            }
            Op::LogSumExp(x, mask) => {
                let t = self.value(*x);
                let cols = last_dim(t, "log_sum_exp")?;
                check_mask(mask, t, cols)?;
                let out = t
                    .data()
                    .chunks(cols)
                    .enumerate()
                    .map(|(r, row)| {
                        let m = mask.as_ref().map(|m| &m[r * cols..(r + 1) * cols]);
                        let (max, sum) = row_shifted_sum(row, m);
                        max + sum.ln()
                    })
                    .collect();
                Tensor::new(t.shape()[..t.rank() - 1].to_vec(), out)
            }
            Op::CrossEntropy { logits, mask, targets } => {
                let t = self.value(*logits);
                let (rows, cols) = t.dims2()?;
                check_mask(mask, t, cols)?;
                if targets.is_empty() {
                    return Err(Error::Contract("cross_entropy with no targets".into()));
                }
                let mut stats = vec![None; rows];
                let mut out = Vec::with_capacity(targets.len());
                for &(r, c) in targets {
                    if r >= rows || c >= cols {
                        return Err(Error::Dimension(format!("target ({r},{c}) outside {rows}x{cols}")));
                    }
                    let m = mask.as_ref().map(|m| &m[r * cols..(r + 1) * cols]);
                    if m.is_some_and(|m| !m[c]) {
                        return Err(Error::Contract(format!("target ({r},{c}) is masked out")));
                    }
                    let (max, sum) = *stats[r].get_or_insert_with(|| row_shifted_sum(t.row(r), m));
                    out.push(sum.ln() - (t.data()[r * cols + c] - max));
                }
                Ok(Tensor::vector(out))
            }
            Op::Reshape(x, shape) => self.value(*x).reshape(shape.clone()),
            Op::Transpose(x) => {
                let t = self.value(*x);
                let (r, c) = t.dims2()?;
                Tensor::new(vec![c, r], transpose2(t.data(), r, c))
            }
            Op::BroadcastRows(x, n) => {
                let t = self.value(*x);
                if t.rank() != 1 {
                    return Err(Error::Dimension(format!("broadcast_rows needs a vector, got {:?}", t.shape())));
                }
                let mut data = Vec::with_capacity(n * t.len());
                for _ in 0..*n {
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![*n, t.len()], data)
            }
            Op::ConcatRows(parts) => {
                let mut rows = 0;
                let mut cols = None;
                let mut data = Vec::new();
                for p in parts {
                    let (r, c) = self.value(*p).dims2()?;
                    if *cols.get_or_insert(c) != c {
                        return Err(Error::Dimension("concat_rows column counts differ".into()));
                    }
                    rows += r;
                    data.extend_from_slice(self.value(*p).data());
                }
                let cols = cols.ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
                Tensor::new(vec![rows, cols], data)
            }
            Op::SelectRows(x, idx) => {
                let t = self.value(*x);
                let (rows, cols) = t.dims2()?;
                let mut data = Vec::with_capacity(idx.len() * cols);
                for &i in idx {
                    if i >= rows {
                        return Err(Error::Dimension(format!("row {i} out of {rows}")));
                    }
                    data.extend_from_slice(t.row(i));
                }
                Tensor::new(vec![idx.len(), cols], data)
            }
            Op::SliceCols(x, start, end) => {
                let t = self.value(*x);
                let (rows, cols) = t.dims2()?;
                if start >= end || *end > cols {
                    return Err(Error::Dimension(format!("column slice {start}..{end} of {cols}")));
                }
                let mut data = Vec::with_capacity(rows * (end - start));
                for r in 0..rows {
                    data.extend_from_slice(&t.row(r)[*start..*end]);
                }
                Tensor::new(vec![rows, end - start], data)
            }
            Op::Gather(x, idx) => {
                let t = self.value(*x);
                let data = idx
                    .iter()
                    .map(|&i| {
                        t.data()
                            .get(i)
                            .copied()
                            .ok_or_else(|| Error::Dimension(format!("gather index {i} out of {}", t.len())))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tensor::new(vec![idx.len()], data)
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Neg(x))
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(x, c))
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp(x))
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Log(x))
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }
    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Parameter(format!("clamp bounds {lo} > {hi}")));
        }
        self.push(Op::Clamp(x, lo, hi))
    }

    /// Straight-through hardening: forward emits exactly 0.0 below 0.5 and
    /// exactly 1.0 at or above it; backward passes the incoming gradient
    /// through unchanged.
    pub fn harden(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Harden(x))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.push(Op::Sum(x, axis))
    }
    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.push(Op::Mean(x, axis))
    }
    /// Max reduction. Backward routes the whole gradient to the first
    /// (lowest-index) maximal element of each group.
    pub fn max(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.push(Op::Max(x, axis))
    }

    /// `x / max(‖x‖₂, eps)` along the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.push(Op::L2Normalize(x, eps))
    }

    /// Max-shifted `log Σ exp` along the last axis, optionally over masked entries only.
    pub fn log_sum_exp(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        self.push(Op::LogSumExp(x, mask))
    }

    /// Per-target softmax cross-entropy over the rows of a logit matrix:
    /// `log Σ_k exp(x[r,k] - m_r) - (x[r,c] - m_r)` for each `(r, c)` target,
    /// where `k` ranges over the row's masked entries and `m_r` is their maximum.
    pub fn cross_entropy(&mut self, logits: Var, mask: Option<Vec<bool>>, targets: Vec<(usize, usize)>) -> Result<Var> {
        self.push(Op::CrossEntropy { logits, mask, targets })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Reshape(x, shape))
    }
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }
    /// Repeats a vector `[d]` into an `[n × d]` matrix.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        self.push(Op::BroadcastRows(x, n))
    }
    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::ConcatRows(parts))
    }
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        self.push(Op::SelectRows(x, rows))
    }
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols(x, start, end))
    }
    /// Picks elements by flat (row-major) index into a vector.
    pub fn gather(&mut self, x: Var, flat: Vec<usize>) -> Result<Var> {
        self.push(Op::Gather(x, flat))
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// additively across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward on non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            if let Op::Leaf = op {
                if let Some(acc) = self.nodes[idx].grad.as_mut() {
                    acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                continue;
            }
            self.backprop(idx, &op, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop(&self, idx: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        let nodes = &self.nodes;
        let mut acc = |v: Var, contrib: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            contrib(slot);
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                acc(*a, &mut |da| {
                    let bt = transpose2(bv.data(), k, n);
                    matmul_into(g, &bt, da, m, n, k);
                });
                acc(*b, &mut |db| {
                    let at = transpose2(av.data(), m, k);
                    matmul_into(&at, g, db, k, m, n);
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let is_mul = matches!(op, Op::Mul(..));
                // d/dx and d/dy at element i, given the (possibly scalar) operands.
                let xi = |i: usize| if x.is_scalar() { x.data()[0] } else { x.data()[i] };
                let yi = |i: usize| if y.is_scalar() { y.data()[0] } else { y.data()[i] };
                acc(*a, &mut |da| {
                    for (i, gi) in g.iter().enumerate() {
                        let d = if is_mul { gi * yi(i) } else { *gi };
                        if x.is_scalar() {
                            da[0] += d;
                        } else {
                            da[i] += d;
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for (i, gi) in g.iter().enumerate() {
                        let d = if is_mul { gi * xi(i) } else { sign * gi };
                        if y.is_scalar() {
                            db[0] += d;
                        } else {
                            db[i] += d;
                        }
                    }
                });
            }
            Op::Neg(x) => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi)),
            Op::Scale(x, c) => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi)),
            Op::Harden(x) => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)),
            Op::Exp(x) => acc(*x, &mut |dx| {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y;
                }
            }),
            Op::Log(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |dx| {
                    for ((d, gi), v) in dx.iter_mut().zip(g).zip(xv.data()) {
                        *d += gi / v;
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |dx| {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y * (1.0 - y);
                }
            }),
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |dx| {
                    for ((d, gi), v) in dx.iter_mut().zip(g).zip(xv.data()) {
                        if *v > 0.0 {
                            *d += gi;
                        }
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                acc(*x, &mut |dx| {
                    for ((d, gi), v) in dx.iter_mut().zip(g).zip(xv.data()) {
                        if v >= lo && v <= hi {
                            *d += gi;
                        }
                    }
                })
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) | Op::Max(x, axis) => {
                let xv = self.value(*x);
                let d = xv.data();
                acc(*x, &mut |dx| {
                    for_each_group(xv.shape(), *axis, |o, idx| match op {
                        Op::Sum(..) => idx.for_each(|i| dx[i] += g[o]),
                        Op::Mean(..) => {
                            let members: Vec<usize> = idx.collect();
                            let w = g[o] / members.len() as f64;
                            members.iter().for_each(|&i| dx[i] += w);
                        }
                        _ => {
                            let mut best: Option<usize> = None;
                            for i in idx {
                                if best.is_none_or(|b| d[i] > d[b]) {
                                    best = Some(i);
                                }
                            }
                            if let Some(b) = best {
                                dx[b] += g[o];
                            }
                        }
                    });
                });
            }
            Op::L2Normalize(x, eps) => {
                let xv = self.value(*x);
                let cols = *xv.shape().last().unwrap();
                acc(*x, &mut |dx| {
                    for (r, (xr, yr)) in xv.data().chunks(cols).zip(out.data().chunks(cols)).enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dr = &mut dx[r * cols..(r + 1) * cols];
                        if norm >= *eps {
                            let dot: f64 = yr.iter().zip(gr).map(|(y, gi)| y * gi).sum();
                            for ((d, gi), y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += (gi - y * dot) / norm;
                            }
                        } else {
                            for (d, gi) in dr.iter_mut().zip(gr) {
                                *d += gi / eps;
                            }
                        }
                    }
                })
            }
            Op::LogSumExp(x, mask) => {
                let xv = self.value(*x);
                let cols = *xv.shape().last().unwrap();
                acc(*x, &mut |dx| {
                    for (r, row) in xv.data().chunks(cols).enumerate() {
                        let lse = out.data()[r];
                        for (k, v) in row.iter().enumerate() {
                            let i = r * cols + k;
                            if mask.as_ref().is_none_or(|m| m[i]) {
                                dx[i] += g[r] * (v - lse).exp();
                            }
                        }
                    }
                })
            }
            Op::CrossEntropy { logits, mask, targets } => {
                let xv = self.value(*logits);
                let cols = xv.shape()[1];
                // Softmax weights of each row are needed once, scaled by the
                // summed upstream gradient of that row's targets.
                let mut row_weight = vec![0.0; xv.shape()[0]];
                for (t, &(r, _)) in targets.iter().enumerate() {
                    row_weight[r] += g[t];
                }
                acc(*logits, &mut |dx| {
                    for (r, &w) in row_weight.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let m = mask.as_ref().map(|m| &m[r * cols..(r + 1) * cols]);
                        let (max, sum) = row_shifted_sum(xv.row(r), m);
                        for (k, v) in xv.row(r).iter().enumerate() {
                            if m.is_none_or(|m| m[k]) {
                                dx[r * cols + k] += w * (v - max).exp() / sum;
                            }
                        }
                    }
                    for (t, &(r, c)) in targets.iter().enumerate() {
                        dx[r * cols + c] -= g[t];
                    }
                })
            }
            Op::Reshape(x, _) => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)),
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                // out is c×r; its transpose has the input layout r×c.
                let gt = transpose2(g, c, r);
                acc(*x, &mut |dx| dx.iter_mut().zip(&gt).for_each(|(d, gi)| *d += gi))
            }
            Op::BroadcastRows(x, _) => {
                let cols = self.value(*x).len();
                acc(*x, &mut |dx| {
                    for row in g.chunks(cols) {
                        dx.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let slice = &g[offset..offset + n];
                    acc(*p, &mut |dp| dp.iter_mut().zip(slice).for_each(|(d, gi)| *d += gi));
                    offset += n;
                }
            }
            Op::SelectRows(x, rows) => {
                let cols = self.value(*x).shape()[1];
                acc(*x, &mut |dx| {
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g[k * cols..(k + 1) * cols];
                        dx[r * cols..(r + 1) * cols].iter_mut().zip(src).for_each(|(d, gi)| *d += gi);
                    }
                })
            }
            Op::SliceCols(x, start, end) => {
                let cols = self.value(*x).shape()[1];
                let width = end - start;
                acc(*x, &mut |dx| {
                    for (r, src) in g.chunks(width).enumerate() {
                        dx[r * cols + start..r * cols + end].iter_mut().zip(src).for_each(|(d, gi)| *d += gi);
                    }
                })
            }
            Op::Gather(x, idx) => acc(*x, &mut |dx| {
                for (k, &i) in idx.iter().enumerate() {
                    dx[i] += g[k];
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 5.0, 6.0]));
        let i = tape.constant(Tensor::identity(3));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
        let err = tape.matmul(a, a).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn sigmoid_and_relu_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, -3.0]), true);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data()[1], 0.0);
        let l = tape.sum(r, None).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let m = tape.mean(x, None).unwrap();
        assert_eq!(tape.item(m).unwrap(), 2.0);
        let s = tape.sum(x, Some(0)).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(matches!(tape.sum(x, Some(1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn max_routes_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[2.0, 5.0, 5.0]), true);
        let m = tape.max(x, None).unwrap();
        assert_eq!(tape.item(m).unwrap(), 5.0);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn axis_reduction_of_matrix() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 9.0, 3.0, 4.0, 5.0, 6.0]), true);
        let s = tape.sum(x, Some(0)).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 14.0, 9.0]);
        let mx = tape.max(x, Some(1)).unwrap();
        assert_eq!(tape.value(mx).data(), &[9.0, 6.0]);
        let total = tape.sum(mx, None).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn l2_normalize_points() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x, 1e-12).unwrap();
        assert!((tape.value(y).data()[0] - 0.6).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 0.8).abs() < 1e-15);
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let yz = tape.l2_normalize(z, 1e-12).unwrap();
        assert_eq!(tape.value(yz).data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_sum_exp_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let l = tape.log_sum_exp(x, None).unwrap();
        assert_eq!(tape.item(l).unwrap(), 2f64.ln());
        let big = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let l = tape.log_sum_exp(big, None).unwrap();
        assert_eq!(tape.item(l).unwrap(), 1000.0 + 2f64.ln());
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq, None).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
        // second call accumulates
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0, 12.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unrelated_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let w = tape.leaf(t(&[2], &[5.0, 6.0]), true);
        let l = tape.sum(x, None).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn harden_is_exact_and_straight_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[0.3, 0.5, 0.49999, 0.9]), true);
        let h = tape.harden(x).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 1.0, 0.0, 1.0]);
        let l = tape.sum(h, None).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn replay_tracks_leaf_mutation() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let e = tape.exp(w).unwrap();
        let s = tape.sum(e, None).unwrap();
        tape.set_leaf(w, t(&[2], &[0.0, 0.0])).unwrap();
        tape.replay().unwrap();
        assert_eq!(tape.item(s).unwrap(), 2.0);
        assert!(tape.set_leaf(e, t(&[2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1000.0]));
        assert_eq!(tape.exp(x).unwrap_err(), Error::NonFinite("exp"));
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]), true);
        let ce = tape.cross_entropy(x, None, vec![(0, 2), (1, 0)]).unwrap();
        let v = tape.value(ce).data().to_vec();
        let lse0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((v[0] - (lse0 - 3.0)).abs() < 1e-14);
        assert_eq!(v[1], 3f64.ln());
        let masked = tape
            .cross_entropy(x, Some(vec![false, true, true, true, false, true]), vec![(1, 0)])
            .unwrap();
        assert_eq!(tape.value(masked).data()[0], 2f64.ln());
        assert!(tape.cross_entropy(x, Some(vec![true; 6]), vec![(2, 0)]).is_err());
    }
}
