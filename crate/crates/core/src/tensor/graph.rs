use std::cell::RefCell;

use super::{axis_split, broadcast_shape, numel, BroadcastIndex, Result, Tensor, TensorError};

/// Operation recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Exp,
    Log,
    Softplus,
    Tanh,
    Negate,
    Sigmoid,
    Square,
    Sum,
    Mean,
    LogSumExp,
    Broadcast,
    Reshape,
    Concat,
    Slice,
    Clamp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(OpKind, usize, usize),
    Unary(OpKind, usize),
    /// Reduction over one axis (`None` reduces everything to a scalar).
    Reduce(OpKind, usize, Option<usize>),
    Broadcast(usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Clamp { input: usize, lo: f64, hi: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Binary(k, ..) | Op::Unary(k, _) | Op::Reduce(k, ..) => *k,
            Op::Broadcast(_) => OpKind::Broadcast,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Clamp { .. } => OpKind::Clamp,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Reduce(_, a, _)
            | Op::Broadcast(a)
            | Op::Reshape(a)
            | Op::Slice { input: a, .. }
            | Op::Clamp { input: a, .. } => vec![*a],
            Op::Concat(v, _) => v.clone(),
        }
    }
}

#[derive(Default)]
struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
}

/// Append-only computation tape. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Graph {
    tape: RefCell<Tape>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
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

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Kind and input ids of node `id`.
    pub fn node(&self, id: usize) -> (OpKind, Vec<usize>) {
        let tape = self.tape.borrow();
        (tape.ops[id].kind(), tape.ops[id].inputs())
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut tape = self.tape.borrow_mut();
        let id = tape.values.len();
        tape.values.push(value);
        tape.ops.push(op);
        tape.requires_grad.push(requires_grad);
        Var { graph: self, id }
    }

    fn any_requires(&self, ids: &[usize]) -> bool {
        let tape = self.tape.borrow();
        ids.iter().any(|&i| tape.requires_grad[i])
    }

    fn record(&self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let rg = self.any_requires(&op.inputs());
        Ok(self.push(value, op, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let tape = self.tape.borrow();
        let root_shape = tape.values[root.id].shape().to_vec();
        if numel(&root_shape) != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        let n = root.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..n).rev() {
            if !tape.requires_grad[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&tape, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut out = Vec::with_capacity(n);
        for (id, g) in grads.into_iter().enumerate() {
            out.push(match (g, &tape.ops[id]) {
                (Some(g), Op::Leaf) if tape.requires_grad[id] => Some(
                    Tensor::new(tape.values[id].shape().to_vec(), g).expect("gradient shape"),
                ),
                _ => None,
            });
        }
        Ok(Gradients { leaves: out })
    }
}

/// Gradients of the root with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf. Leaves the root does not depend on get zeros.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        match self.leaves.get(var.id) {
            Some(Some(g)) => Some(g.clone()),
            _ => {
                let tape = var.graph.tape.borrow();
                (matches!(tape.ops[var.id], Op::Leaf) && tape.requires_grad[var.id])
                    .then(|| Tensor::zeros(tape.values[var.id].shape().to_vec()))
            }
        }
    }

    /// Whether the root actually depends on this leaf.
    pub fn touched(&self, var: Var<'_>) -> bool {
        matches!(self.leaves.get(var.id), Some(Some(_)))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn backprop_node(tape: &Tape, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &tape.values[id];
    let rg = &tape.requires_grad;
    match &tape.ops[id] {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (va, vb) = (&tape.values[*a], &tape.values[*b]);
            let (da, db) = (va.data(), vb.data());
            match kind {
                OpKind::MatMul => {
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if rg[*a] {
                        let ga = accumulate(grads, *a, m * k);
                        // ga += g · bᵀ
                        gemm(m, n, k, g, (n, 1), db, (1, n), ga, (k, 1));
                    }
                    if rg[*b] {
                        let gb = accumulate(grads, *b, k * n);
                        // gb += aᵀ · g
                        gemm(k, m, n, da, (1, k), g, (n, 1), gb, (n, 1));
                    }
                }
                _ => {
                    let ia = BroadcastIndex::new(out.shape(), va.shape());
                    let ib = BroadcastIndex::new(out.shape(), vb.shape());
                    if rg[*a] {
                        let ga = accumulate(grads, *a, va.numel());
                        for i in 0..g.len() {
                            let y = db[ib.at(i)];
                            ga[ia.at(i)] += g[i]
                                * match kind {
                                    OpKind::Add | OpKind::Sub => 1.0,
                                    OpKind::Mul => y,
                                    OpKind::Div => 1.0 / y,
                                    _ => unreachable!(),
                                };
                        }
                    }
                    if rg[*b] {
                        let gb = accumulate(grads, *b, vb.numel());
                        for i in 0..g.len() {
                            let (x, y) = (da[ia.at(i)], db[ib.at(i)]);
                            gb[ib.at(i)] += g[i]
                                * match kind {
                                    OpKind::Add => 1.0,
                                    OpKind::Sub => -1.0,
                                    OpKind::Mul => x,
                                    OpKind::Div => -x / (y * y),
                                    _ => unreachable!(),
                                };
                        }
                    }
                }
            }
        }
        Op::Unary(kind, a) => {
            if !rg[*a] {
                return;
            }
            let x = tape.values[*a].data();
            let y = out.data();
            let ga = accumulate(grads, *a, x.len());
            for i in 0..g.len() {
                ga[i] += g[i]
                    * match kind {
                        OpKind::Exp => y[i],
                        OpKind::Log => 1.0 / x[i],
                        OpKind::Softplus => sigmoid(x[i]),
                        OpKind::Tanh => 1.0 - y[i] * y[i],
                        OpKind::Negate => -1.0,
                        OpKind::Sigmoid => y[i] * (1.0 - y[i]),
                        OpKind::Square => 2.0 * x[i],
                        _ => unreachable!(),
                    };
            }
        }
        Op::Reduce(kind, a, axis) => {
            if !rg[*a] {
                return;
            }
            let vin = &tape.values[*a];
            let x = vin.data();
            let (outer, len, inner) = match axis {
                Some(ax) => axis_split(vin.shape(), *ax),
                None => (1, x.len(), 1),
            };
            let ga = accumulate(grads, *a, x.len());
            let y = out.data();
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let src = (o * len + l) * inner + i;
                        let dst = o * inner + i;
                        ga[src] += g[dst]
                            * match kind {
                                OpKind::Sum => 1.0,
                                OpKind::Mean => 1.0 / len as f64,
                                OpKind::LogSumExp => (x[src] - y[dst]).exp(),
                                _ => unreachable!(),
                            };
                    }
                }
            }
        }
        Op::Broadcast(a) => {
            if !rg[*a] {
                return;
            }
            let vin = &tape.values[*a];
            let idx = BroadcastIndex::new(out.shape(), vin.shape());
            let ga = accumulate(grads, *a, vin.numel());
            for (i, gi) in g.iter().enumerate() {
                ga[idx.at(i)] += gi;
            }
        }
        Op::Reshape(a) => {
            if rg[*a] {
                let ga = accumulate(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Concat(inputs, axis) => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = tape.values[inp].shape()[*axis];
                if rg[inp] {
                    let gi = accumulate(grads, inp, outer * len * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for k in 0..len * inner {
                            gi[dst + k] += g[src + k];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            if !rg[*input] {
                return;
            }
            let vin = &tape.values[*input];
            let (outer, total, inner) = axis_split(vin.shape(), *axis);
            let len = out.shape()[*axis];
            let gi = accumulate(grads, *input, vin.numel());
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                for k in 0..len * inner {
                    gi[dst + k] += g[src + k];
                }
            }
        }
        Op::Clamp { input, lo, hi } => {
            if !rg[*input] {
                return;
            }
            let x = tape.values[*input].data();
            let gi = accumulate(grads, *input, x.len());
            for i in 0..g.len() {
                if x[i] >= *lo && x[i] <= *hi {
                    gi[i] += g[i];
                }
            }
        }
    }
}

/// c += a · b for row/column-strided matrices (a: m×k, b: k×n, c: m×n).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the extents asserted above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.tape.borrow().values[self.id].clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.tape.borrow().values[self.id].shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tape.borrow().requires_grad[self.id]
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.graph.tape.borrow().values[self.id].data()[0]
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.tape.borrow().values[self.id])
    }

    fn binary(
        self,
        other: Var<'g>,
        kind: OpKind,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let value = {
            let tape = self.graph.tape.borrow();
            let (a, b) = (&tape.values[self.id], &tape.values[other.id]);
            let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
                TensorError::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                }
            })?;
            if kind == OpKind::Div && b.data().contains(&0.0) {
                return Err(TensorError::DomainError {
                    op: name,
                    detail: "division by zero".into(),
                });
            }
            let (da, db) = (a.data(), b.data());
            let n = numel(&shape);
            let data: Vec<f64> = if a.shape() == b.shape() {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let ia = BroadcastIndex::new(&shape, a.shape());
                let ib = BroadcastIndex::new(&shape, b.shape());
                (0..n).map(|i| f(da[ia.at(i)], db[ib.at(i)])).collect()
            };
            Tensor { shape, data }
        };
        self.graph
            .record(value, Op::Binary(kind, self.id, other.id), name)
    }

    fn unary(self, kind: OpKind, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var<'g>> {
        let value = self.with_value(|a| Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().map(|&x| f(x)).collect(),
        });
        self.graph.record(value, Op::Unary(kind, self.id), name)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, OpKind::Add, "add", |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, OpKind::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, OpKind::Mul, "mul", |x, y| x * y)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, OpKind::Div, "div", |x, y| x / y)
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        let k = self.graph.constant(Tensor::scalar(c));
        self.mul(k)
    }

    /// Adds a constant.
    pub fn shift(self, c: f64) -> Result<Var<'g>> {
        let k = self.graph.constant(Tensor::scalar(c));
        self.add(k)
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let value = {
            let tape = self.graph.tape.borrow();
            let (a, b) = (&tape.values[self.id], &tape.values[other.id]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut c, (n, 1));
            Tensor {
                shape: vec![m, n],
                data: c,
            }
        };
        self.graph
            .record(value, Op::Binary(OpKind::MatMul, self.id, other.id), "matmul")
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary(OpKind::Exp, "exp", f64::exp)
    }

    pub fn log(self) -> Result<Var<'g>> {
        if let Some(bad) = self.with_value(|a| a.data().iter().copied().find(|&v| v <= 0.0)) {
            return Err(TensorError::DomainError {
                op: "log",
                detail: format!("nonpositive input {bad}"),
            });
        }
        self.unary(OpKind::Log, "log", f64::ln)
    }

    pub fn softplus(self) -> Result<Var<'g>> {
        self.unary(OpKind::Softplus, "softplus", softplus)
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.unary(OpKind::Tanh, "tanh", f64::tanh)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.unary(OpKind::Negate, "negate", |x| -x)
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary(OpKind::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.unary(OpKind::Square, "square", |x| x * x)
    }

    fn reduce(self, kind: OpKind, axis: Option<usize>, name: &'static str) -> Result<Var<'g>> {
        let value = self.with_value(|a| -> Result<Tensor> {
            let (outer, len, inner, shape) = match axis {
                Some(ax) => {
                    if ax >= a.rank() {
                        return Err(TensorError::InvalidAxis {
                            axis: ax,
                            rank: a.rank(),
                        });
                    }
                    let (o, l, i) = axis_split(a.shape(), ax);
                    let mut s = a.shape().to_vec();
                    s.remove(ax);
                    (o, l, i, s)
                }
                None => (1, a.numel(), 1, Vec::new()),
            };
            let x = a.data();
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| x[(o * len + l) * inner + i];
                    data[o * inner + i] = match kind {
                        OpKind::Sum => (0..len).map(at).sum(),
                        OpKind::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                        OpKind::LogSumExp => {
                            let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                            if m == f64::NEG_INFINITY {
                                m
                            } else {
                                m + (0..len).map(|l| (at(l) - m).exp()).sum::<f64>().ln()
                            }
                        }
                        _ => unreachable!(),
                    };
                }
            }
            Ok(Tensor { shape, data })
        })?;
        self.graph.record(value, Op::Reduce(kind, self.id, axis), name)
    }

    /// Sum of all elements (scalar result).
    pub fn sum(self) -> Result<Var<'g>> {
        self.reduce(OpKind::Sum, None, "sum")
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(OpKind::Sum, Some(axis), "sum")
    }

    pub fn mean(self) -> Result<Var<'g>> {
        self.reduce(OpKind::Mean, None, "mean")
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(OpKind::Mean, Some(axis), "mean")
    }

    /// Overflow-safe log-sum-exp along `axis`; the axis is removed.
    pub fn logsumexp(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(OpKind::LogSumExp, Some(axis), "logsumexp")
    }

    /// Expands size-1 or missing leading axes to `shape`.
    pub fn broadcast(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.with_value(|a| -> Result<Tensor> {
            match broadcast_shape(a.shape(), shape) {
                Some(s) if s == shape => {}
                _ => {
                    return Err(TensorError::ShapeMismatch {
                        op: "broadcast",
                        lhs: a.shape().to_vec(),
                        rhs: shape.to_vec(),
                    })
                }
            }
            let idx = BroadcastIndex::new(shape, a.shape());
            let data = (0..numel(shape)).map(|i| a.data()[idx.at(i)]).collect();
            Ok(Tensor {
                shape: shape.to_vec(),
                data,
            })
        })?;
        self.graph.record(value, Op::Broadcast(self.id), "broadcast")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.with_value(|a| a.clone().reshape(shape.to_vec()))?;
        self.graph.record(value, Op::Reshape(self.id), "reshape")
    }

    /// Concatenates along an existing axis.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let graph = parts
            .first()
            .ok_or(TensorError::ShapeMismatch {
                op: "concat",
                lhs: vec![],
                rhs: vec![],
            })?
            .graph;
        let value = {
            let tape = graph.tape.borrow();
            let first = tape.values[parts[0].id].shape().to_vec();
            if axis >= first.len() {
                return Err(TensorError::InvalidAxis {
                    axis,
                    rank: first.len(),
                });
            }
            let mut total = 0;
            for p in parts {
                let s = tape.values[p.id].shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first,
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let v = &tape.values[p.id];
                    let block = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor { shape, data }
        };
        graph.record(
            value,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            "concat",
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g>> {
        let value = self.with_value(|a| -> Result<Tensor> {
            if axis >= a.rank() {
                return Err(TensorError::InvalidAxis {
                    axis,
                    rank: a.rank(),
                });
            }
            if start > end || end > a.shape()[axis] {
                return Err(TensorError::ShapeMismatch {
                    op: "slice",
                    lhs: a.shape().to_vec(),
                    rhs: vec![start, end],
                });
            }
            let (outer, total, inner) = axis_split(a.shape(), axis);
            let len = end - start;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * total + start) * inner;
                data.extend_from_slice(&a.data()[from..from + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            Ok(Tensor { shape, data })
        })?;
        self.graph.record(
            value,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            "slice",
        )
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g>> {
        let value = self.with_value(|a| Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().map(|x| x.clamp(lo, hi)).collect(),
        });
        self.graph.record(
            value,
            Op::Clamp {
                input: self.id,
                lo,
                hi,
            },
            "clamp",
        )
    }

    /// `x - logsumexp(x)` along the last axis.
    pub fn log_softmax(self) -> Result<Var<'g>> {
        let shape = self.shape();
        let last = shape.len() - 1;
        let mut keep = shape.clone();
        keep[last] = 1;
        let lse = self.logsumexp(last)?.reshape(&keep)?;
        self.sub(lse)
    }
}
