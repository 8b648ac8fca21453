//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape index order is a valid
//! topological order and `backward` is a single reverse sweep. Gradients are
//! additive across `backward` calls until [`Graph::zero_grad`] is called.

use std::sync::Arc;

use crate::error::{ApexError, Result};
use crate::tensor::Tensor;

/// Norm guard added to each norm in cosine similarities.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Sigmoid,
    Relu,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// An operation whose forward pass is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reduce {
        op: ReduceOp,
        input: Var,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    StopGradient,
    Gather(Var, Arc<[usize]>),
    Reshape(Var),
    CosineRows(Var, Var),
    SoftmaxRows(Var),
    Custom(Vec<Var>, Arc<dyn CustomOp>),
}

/// One tape entry: value, accumulated gradient, producing op, grad flag.
pub struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Default)]
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

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, zeros when nothing reached the node.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(ApexError::shape(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}]"),
            ));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn elementwise(&mut self, op: UnaryOrBinary, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (UnaryOrBinary::Unary(u), None) => self.unary(u, a),
            (UnaryOrBinary::Binary(bin), Some(b)) => self.binary(bin, a, b),
            (UnaryOrBinary::Unary(_), Some(_)) => {
                Err(ApexError::invalid("unary op given two operands"))
            }
            (UnaryOrBinary::Binary(_), None) => {
                Err(ApexError::invalid("binary op given one operand"))
            }
        }
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(ApexError::shape(
                "elementwise",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let va = self.value(a);
        if op == UnaryOp::Log {
            if let Some(bad) = va.data().iter().find(|&&v| v <= 0.0) {
                return Err(ApexError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let out = va.map(match op {
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Relu => |x: f64| x.max(0.0),
            UnaryOp::Softplus => softplus,
        });
        let rg = self.rg(a);
        Ok(self.push(out, Op::Unary(op, a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("exp is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a).expect("relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("sigmoid is total")
    }

    /// `x + bias` with `bias` broadcast over the rows of a rank-2 `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let vb = self.value(bias);
        if vb.len() != n {
            return Err(ApexError::shape(
                "add_bias",
                format!("bias of {} for {n} columns", vb.len()),
            ));
        }
        let b = vb.data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let va = self.value(a);
        let (outer, len, inner, out_shape) = match axis {
            None => (1, va.len(), 1, Vec::new()),
            Some(ax) => {
                if ax >= va.rank() {
                    return Err(ApexError::InvalidAxis {
                        axis: ax,
                        rank: va.rank(),
                    });
                }
                let s = va.shape();
                let outer = s[..ax].iter().product();
                let inner = s[ax + 1..].iter().product();
                let mut out_shape = s.to_vec();
                out_shape.remove(ax);
                (outer, s[ax], inner, out_shape)
            }
        };
        if len == 0 {
            return Err(ApexError::invalid("reduction over an empty axis"));
        }
        let d = va.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| d[(o * len + l) * inner + i];
                let slot = o * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let s: f64 = (0..len).map(at).sum();
                        out[slot] = if op == ReduceOp::Mean { s / len as f64 } else { s };
                    }
                    ReduceOp::Max => {
                        let mut best = 0;
                        for l in 1..len {
                            if at(l) > at(best) {
                                best = l;
                            }
                        }
                        out[slot] = at(best);
                        argmax[slot] = (o * len + best) * inner + i;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Reduce {
                op,
                input: a,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Sum, a, None).expect("full reduction")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Mean, a, None).expect("full reduction")
    }

    /// Same value as `a`; gradient never flows back through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// `out[i] = a.flat[indices[i]]`, viewed with `shape`.
    pub fn gather(&mut self, a: Var, indices: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(ApexError::shape("gather", "index count does not match shape"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.len()) {
            return Err(ApexError::shape(
                "gather",
                format!("index {bad} out of {}", va.len()),
            ));
        }
        let data = indices.iter().map(|&i| va.data()[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gather(a, indices), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Pairwise cosine similarities between the rows of `u` [m×k] and `v` [n×k].
    pub fn cosine_rows(&mut self, u: Var, v: Var) -> Result<Var> {
        let (m, k) = self.value(u).dims2()?;
        let (n, k2) = self.value(v).dims2()?;
        if k != k2 {
            return Err(ApexError::shape(
                "cosine_rows",
                format!("row length {k} vs {k2}"),
            ));
        }
        let out = cosine_matrix(self.value(u).data(), self.value(v).data(), m, n, k);
        let rg = self.rg(u) || self.rg(v);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::CosineRows(u, v), rg))
    }

    /// Scalar cosine similarity of two vectors of equal length.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (lu, lv) = (self.value(u).len(), self.value(v).len());
        if lu != lv {
            return Err(ApexError::shape("cosine_similarity", format!("{lu} vs {lv}")));
        }
        for (x, name) in [(u, "cosine_similarity"), (v, "cosine_similarity")] {
            if self.value(x).data().iter().all(|&e| e == 0.0) {
                return Err(ApexError::DegenerateInput(name));
            }
        }
        let ur = self.reshape(u, vec![1, lu])?;
        let vr = self.reshape(v, vec![1, lv])?;
        let c = self.cosine_rows(ur, vr)?;
        self.reshape(c, Vec::new())
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::SoftmaxRows(a), rg))
    }

    /// Records a caller-computed result together with its backward rule.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, op: Arc<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom(inputs, op), rg)
    }

    /// Accumulates d(loss)/d(node) into every gradient-requiring ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(ApexError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else { continue };
            for (input, gi) in self.input_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => add_into(acc, &gi),
                    slot @ None => *slot = Some(gi),
                }
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => add_into(acc, &g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("rank 2");
                let n = val(*b).shape()[1];
                let mut res = Vec::with_capacity(2);
                if self.rg(*a) {
                    let da = matmul_nt(gd, val(*b).data(), m, n, k);
                    res.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if self.rg(*b) {
                    let db = matmul_tn(val(*a).data(), gd, m, k, n);
                    res.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
                res
            }
            Op::Transpose(a) => vec![(*a, g.transpose().expect("rank 2"))],
            Op::Binary(op, a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let shape = va.shape().to_vec();
                match op {
                    BinaryOp::Add => vec![(*a, g.clone()), (*b, g.clone())],
                    BinaryOp::Sub => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
                    BinaryOp::Mul => vec![
                        (*a, Tensor::from_parts(shape.clone(), zip(gd, vb.data(), |x, y| x * y))),
                        (*b, Tensor::from_parts(shape, zip(gd, va.data(), |x, y| x * y))),
                    ],
                }
            }
            Op::Unary(op, a) => {
                let x = val(*a).data();
                let y = out.data();
                let data: Vec<f64> = match op {
                    UnaryOp::Exp => zip(gd, y, |g, y| g * y),
                    UnaryOp::Log => zip(gd, x, |g, x| g / x),
                    UnaryOp::Sigmoid => zip(gd, y, |g, y| g * y * (1.0 - y)),
                    UnaryOp::Relu => zip(gd, x, |g, x| if x > 0.0 { g } else { 0.0 }),
                    UnaryOp::Softplus => zip(gd, x, |g, x| g * sigmoid(x)),
                };
                vec![(*a, Tensor::from_parts(out.shape().to_vec(), data))]
            }
            Op::AddBias(x, b) => {
                let n = out.shape()[1];
                let mut db = vec![0.0; n];
                for row in gd.chunks_exact(n) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![
                    (*x, g.clone()),
                    (*b, Tensor::from_parts(val(*b).shape().to_vec(), db)),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Reduce {
                op,
                input,
                axis,
                argmax,
            } => {
                let vin = val(*input);
                let mut din = vec![0.0; vin.len()];
                match op {
                    ReduceOp::Max => {
                        for (slot, &src) in argmax.iter().enumerate() {
                            din[src] += gd[slot];
                        }
                    }
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let (len, inner) = match axis {
                            None => (vin.len(), 1),
                            Some(ax) => (
                                vin.shape()[*ax],
                                vin.shape()[ax + 1..].iter().product(),
                            ),
                        };
                        let norm = if *op == ReduceOp::Mean { 1.0 / len as f64 } else { 1.0 };
                        for (flat, d) in din.iter_mut().enumerate() {
                            let i = flat % inner;
                            let o = flat / (inner * len);
                            *d = gd[o * inner + i] * norm;
                        }
                    }
                }
                vec![(*input, Tensor::from_parts(vin.shape().to_vec(), din))]
            }
            Op::Gather(a, indices) => {
                let va = val(*a);
                let mut da = vec![0.0; va.len()];
                for (i, &src) in indices.iter().enumerate() {
                    da[src] += gd[i];
                }
                vec![(*a, Tensor::from_parts(va.shape().to_vec(), da))]
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                vec![(*a, Tensor::from_parts(shape, gd.to_vec()))]
            }
            Op::CosineRows(u, v) => {
                let (vu, vv) = (val(*u), val(*v));
                let (m, k) = vu.dims2().expect("rank 2");
                let n = vv.shape()[0];
                let (du, dv) = cosine_matrix_backward(vu.data(), vv.data(), out.data(), gd, m, n, k);
                vec![
                    (*u, Tensor::from_parts(vec![m, k], du)),
                    (*v, Tensor::from_parts(vec![n, k], dv)),
                ]
            }
            Op::SoftmaxRows(a) => {
                let n = out.shape()[1];
                let mut da = vec![0.0; out.len()];
                for ((dr, yr), gr) in da
                    .chunks_exact_mut(n)
                    .zip(out.data().chunks_exact(n))
                    .zip(gd.chunks_exact(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                vec![(*a, Tensor::from_parts(out.shape().to_vec(), da))]
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&ins, out, g);
                debug_assert_eq!(grads.len(), inputs.len(), "{} backward arity", op.name());
                inputs.iter().copied().zip(grads).collect()
            }
        }
    }
}

/// Tag for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOrBinary {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// `A[m×k] · B[k×n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `A[m×n] · B[k×n]ᵀ`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = ar.iter().zip(&b[j * n..(j + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `A[m×k]ᵀ · B[m×n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn row_norms(x: &[f64], k: usize) -> Vec<f64> {
    x.chunks_exact(k)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

pub(crate) fn cosine_matrix(u: &[f64], v: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let nu = row_norms(u, k);
    let nv = row_norms(v, k);
    let mut out = matmul_nt(u, v, m, k, n);
    for i in 0..m {
        for j in 0..n {
            let c = out[i * n + j] / ((nu[i] + COSINE_EPS) * (nv[j] + COSINE_EPS));
            out[i * n + j] = c.clamp(-1.0, 1.0);
        }
    }
    out
}

fn cosine_matrix_backward(
    u: &[f64],
    v: &[f64],
    out: &[f64],
    g: &[f64],
    m: usize,
    n: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let nu = row_norms(u, k);
    let nv = row_norms(v, k);
    let mut du = vec![0.0; m * k];
    let mut dv = vec![0.0; n * k];
    for i in 0..m {
        let ui = &u[i * k..(i + 1) * k];
        let nui = nu[i] + COSINE_EPS;
        for j in 0..n {
            let gij = g[i * n + j];
            if gij == 0.0 {
                continue;
            }
            let vj = &v[j * k..(j + 1) * k];
            let nvj = nv[j] + COSINE_EPS;
            let c = out[i * n + j];
            let inv = 1.0 / (nui * nvj);
            // d c / d u = v/(|u||v|) - c/|u| * u/‖u‖ (epsilon-guarded norms)
            let su = if nu[i] > 0.0 { c / (nui * nu[i]) } else { 0.0 };
            let sv = if nv[j] > 0.0 { c / (nvj * nv[j]) } else { 0.0 };
            let dui = &mut du[i * k..(i + 1) * k];
            for p in 0..k {
                dui[p] += gij * (vj[p] * inv - su * ui[p]);
            }
            let dvj = &mut dv[j * k..(j + 1) * k];
            for p in 0..k {
                dvj[p] += gij * (ui[p] * inv - sv * vj[p]);
            }
        }
    }
    (du, dv)
}
