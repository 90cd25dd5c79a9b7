//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every op appends one node holding its output value. Nodes only reference
//! earlier nodes, so the record is already in topological order and the
//! backward pass is a single reverse sweep.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

/// Lower clamp bound applied to probabilities inside binary cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

/// Kind tag for each recorded operation; used in reports and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddRow,
    MulRow,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Narrow,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    Softmax,
    Sigmoid,
    Tanh,
    Relu,
    Clamp,
    GradReverse,
    Cosine,
    GatherRows,
    LayerNorm,
    Bce,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::AddRow,
        OpKind::MulRow,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::MeanAxis,
        OpKind::Softmax,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Clamp,
        OpKind::GradReverse,
        OpKind::Cosine,
        OpKind::GatherRows,
        OpKind::LayerNorm,
        OpKind::Bce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Softmax => "softmax",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Clamp => "clamp",
            OpKind::GradReverse => "grad_reverse",
            OpKind::Cosine => "cosine",
            OpKind::GatherRows => "gather_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Bce => "bce",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { input: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    SumAxis { input: usize, axis: usize },
    MeanAxis { input: usize, axis: usize },
    Softmax { input: usize, axis: usize },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    GradReverse { input: usize, lambda: f64 },
    Cosine(usize, usize),
    GatherRows { input: usize, index: Vec<usize> },
    LayerNorm { input: usize, eps: f64 },
    Bce { input: usize, target: Tensor },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Relu(..) => OpKind::Relu,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::GradReverse { .. } => OpKind::GradReverse,
            Op::Cosine(..) => OpKind::Cosine,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations for one forward/backward cycle.
///
/// Single-threaded by construction (`RefCell` interior).
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<OpKind>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes every backward rule of `kind` scale its input gradients by 1.5.
    /// Test hook for verifying that gradient checks detect broken rules.
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
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

    /// Runs reverse-mode accumulation from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    nodes[loss.id].value.shape()
                ),
            ));
        }
        let fault = self.fault.get();
        let mut pending: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut done: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        pending[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            let mut contributions = backward_rule(&nodes, node, &g);
            if fault == Some(node.op.kind()) {
                for (_, c) in contributions.iter_mut() {
                    c.iter_mut().for_each(|x| *x *= 1.5);
                }
            }
            for (input, c) in contributions {
                if nodes[input].requires_grad {
                    accumulate(&mut pending[input], c);
                }
            }
            done[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
        }
        Ok(Gradients { grads: done })
    }
}

/// Local vector-Jacobian products for one node.
fn backward_rule(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| &nodes[i].value;
    let y = node.value.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::Scale(a, s) => vec![(*a, g.iter().map(|x| x * s).collect())],
        Op::AddScalar(a) => vec![(*a, g.to_vec())],
        Op::AddRow(x, row) => {
            let n = val(*row).numel();
            let mut grow = vec![0.0; n];
            for chunk in g.chunks(n) {
                for (r, c) in grow.iter_mut().zip(chunk) {
                    *r += c;
                }
            }
            vec![(*x, g.to_vec()), (*row, grow)]
        }
        Op::MulRow(x, row) => {
            let rv = val(*row).data();
            let xv = val(*x).data();
            let n = rv.len();
            let mut gx = vec![0.0; g.len()];
            let mut grow = vec![0.0; n];
            for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                gx[i] = gi * rv[i % n];
                grow[i % n] += gi * xi;
            }
            vec![(*x, gx), (*row, grow)]
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            vec![
                (*a, matmul_nt_raw(g, bt.data(), m, n, k)),
                (*b, matmul_tn_raw(at.data(), g, m, k, n)),
            ]
        }
        Op::Transpose(a) => {
            let shape = val(*a).shape();
            let (r, c) = (shape[0], shape[1]);
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            vec![(*a, ga)]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for &input in inputs {
                let len = val(input).shape()[*axis];
                let mut gi = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    gi.extend_from_slice(&g[base..base + len * inner]);
                }
                offset += len;
                res.push((input, gi));
            }
            res
        }
        Op::Narrow { input, axis, start } => {
            let in_shape = val(*input).shape();
            let (outer, total, inner) = axis_split(in_shape, *axis);
            let len = node.value.shape()[*axis];
            let mut gi = vec![0.0; outer * total * inner];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![(*input, gi)]
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::Mean(a) => {
            let n = val(*a).numel();
            vec![(*a, vec![g[0] / n as f64; n])]
        }
        Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
            let (outer, len, inner) = axis_split(val(*input).shape(), *axis);
            let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gi[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            vec![(*input, gi)]
        }
        Op::Softmax { input, axis } => {
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            let mut gi = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                    for l in 0..len {
                        gi[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                    }
                }
            }
            vec![(*input, gi)]
        }
        Op::Sigmoid(a) => vec![(
            *a,
            g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
        )],
        Op::Tanh(a) => vec![(*a, g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect())],
        Op::Relu(a) => vec![(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Op::Clamp { input, lo, hi } => vec![(
            *input,
            g.iter()
                .zip(val(*input).data())
                .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                .collect(),
        )],
        Op::GradReverse { input, lambda } => {
            vec![(*input, g.iter().map(|x| -lambda * x).collect())]
        }
        Op::Cosine(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let d = *av.shape().last().unwrap();
            let mut ga = vec![0.0; av.numel()];
            let mut gb = vec![0.0; bv.numel()];
            for (r, &gr) in g.iter().enumerate() {
                let ar = &av.data()[r * d..(r + 1) * d];
                let br = &bv.data()[r * d..(r + 1) * d];
                let na = norm(ar);
                let nb = norm(br);
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                let c = y[r];
                for j in 0..d {
                    ga[r * d + j] = gr * (br[j] / (na * nb) - c * ar[j] / (na * na));
                    gb[r * d + j] = gr * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::GatherRows { input, index } => {
            let src = val(*input);
            let d = src.shape()[1];
            let mut gi = vec![0.0; src.numel()];
            for (r, &ix) in index.iter().enumerate() {
                for j in 0..d {
                    gi[ix * d + j] += g[r * d + j];
                }
            }
            vec![(*input, gi)]
        }
        Op::LayerNorm { input, eps } => {
            let x = val(*input);
            let d = *x.shape().last().unwrap();
            let mut gi = vec![0.0; x.numel()];
            for (r, xr) in x.data().chunks(d).enumerate() {
                let (_, inv_std) = row_moments(xr, *eps);
                let yr = &y[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mean_g = gr.iter().sum::<f64>() / d as f64;
                let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gi[r * d + j] = inv_std * (gr[j] - mean_g - yr[j] * mean_gy);
                }
            }
            vec![(*input, gi)]
        }
        Op::Bce { input, target } => {
            let p = val(*input).data();
            let n = p.len() as f64;
            let gi = p
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| {
                    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    g[0] * (-(t / p) + (1.0 - t) / (1.0 - p)) / n
                })
                .collect();
            vec![(*input, gi)]
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn row_moments(x: &[f64], eps: f64) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn elementwise_check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        let rg = self.requires_grad();
        self.tape.push(out, op, rg)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = {
            let (a, b) = (self.value(), other.value());
            elementwise_check(name, &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(out, op, rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Element-wise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    fn row_broadcast(
        &self,
        row: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&row);
        let out = {
            let (x, r) = (self.value(), row.value());
            let n = *x.shape().last().unwrap();
            if r.numel() != n {
                return Err(Error::shape(
                    name,
                    format!("row of {} elements against last axis {n} of {:?}", r.numel(), x.shape()),
                ));
            }
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| f(v, r.data()[i % n]))
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        let rg = self.tape.rg(&[self.id, row.id]);
        Ok(self.tape.push(out, op, rg))
    }

    /// Adds `row` (length = last extent) to every row.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(row, "add_row", Op::AddRow(self.id, row.id), |a, b| a + b)
    }

    /// Multiplies every row element-wise by `row`.
    pub fn mul_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(row, "mul_row", Op::MulRow(self.id, row.id), |a, b| a * b)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if a.rank() != 2 {
                return Err(Error::shape("transpose", format!("rank-2 required, got {:?}", a.shape())));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], data)
        };
        Ok(self.tape.push(out, Op::Transpose(self.id), self.requires_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tape = first.tape;
        let out = {
            let values: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let base = values[0].shape().to_vec();
            check_axis("concat", &base, axis)?;
            let mut total = 0;
            for v in &values {
                let s = v.shape();
                if s.len() != base.len()
                    || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
                {
                    return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_split(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &values {
                    let len = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        for p in parts {
            first.same_tape(p);
        }
        let rg = tape.rg(&ids);
        Ok(tape.push(out, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            check_axis("narrow", a.shape(), axis)?;
            if len == 0 || start + len > a.shape()[axis] {
                return Err(Error::shape(
                    "narrow",
                    format!("range {start}..{} outside axis {axis} of {:?}", start + len, a.shape()),
                ));
            }
            let (outer, total, inner) = axis_split(a.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                data.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.push(
            out,
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let m = {
            let v = self.value();
            v.data().iter().sum::<f64>() / v.numel() as f64
        };
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id), self.requires_grad())
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            check_axis("reduce_axis", a.shape(), axis)?;
            let (outer, len, inner) = axis_split(a.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += a.data()[(o * len + l) * inner + i];
                    }
                }
            }
            if mean {
                data.iter_mut().for_each(|x| *x /= len as f64);
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::from_parts(shape, data)
        };
        let op = if mean {
            Op::MeanAxis { input: self.id, axis }
        } else {
            Op::SumAxis { input: self.id, axis }
        };
        Ok(self.tape.push(out, op, self.requires_grad()))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    /// Max-shifted exponentiate-and-normalize along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            check_axis("softmax", a.shape(), axis)?;
            Tensor::from_parts(a.shape().to_vec(), softmax_raw(a.data(), a.shape(), axis))
        };
        Ok(self.tape.push(out, Op::Softmax { input: self.id, axis }, self.requires_grad()))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { input: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&self, lambda: f64) -> Result<Var<'t>> {
        if !(lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "gradient reversal weight must be non-negative, got {lambda}"
            )));
        }
        let out = self.value().clone();
        Ok(self.tape.push(
            out,
            Op::GradReverse {
                input: self.id,
                lambda,
            },
            self.requires_grad(),
        ))
    }

    /// Row-wise cosine similarity of two equally shaped tensors; one output per
    /// row of the last axis. Rows with zero norm yield 0.
    pub fn cosine(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = {
            let (a, b) = (self.value(), other.value());
            elementwise_check("cosine", &a, &b)?;
            let d = *a.shape().last().unwrap();
            let sims: Vec<f64> = a
                .data()
                .chunks(d)
                .zip(b.data().chunks(d))
                .map(|(x, y)| cosine_raw(x, y))
                .collect();
            let rows = sims.len();
            Tensor::from_parts(vec![rows], sims)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::Cosine(self.id, other.id), rg))
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if a.rank() != 2 {
                return Err(Error::shape("gather_rows", format!("rank-2 required, got {:?}", a.shape())));
            }
            let (rows, d) = (a.shape()[0], a.shape()[1]);
            if index.is_empty() {
                return Err(Error::shape("gather_rows", "empty index"));
            }
            if let Some(bad) = index.iter().find(|&&i| i >= rows) {
                return Err(Error::shape("gather_rows", format!("row {bad} out of {rows}")));
            }
            let data = index.iter().flat_map(|&i| a.row(i).to_vec()).collect();
            Tensor::from_parts(vec![index.len(), d], data)
        };
        Ok(self.tape.push(
            out,
            Op::GatherRows {
                input: self.id,
                index: index.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let out = {
            let a = self.value();
            let d = *a.shape().last().unwrap();
            let mut data = Vec::with_capacity(a.numel());
            for row in a.data().chunks(d) {
                let (mean, inv_std) = row_moments(row, eps);
                data.extend(row.iter().map(|x| (x - mean) * inv_std));
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.tape.push(out, Op::LayerNorm { input: self.id, eps }, self.requires_grad())
    }

    /// Mean binary cross-entropy against a constant target of the same shape.
    /// Inputs are clamped to `[PROB_EPS, 1 - PROB_EPS]`; the gradient is
    /// evaluated at the clamped value, so it never vanishes.
    pub fn bce(&self, target: &Tensor) -> Result<Var<'t>> {
        let loss = {
            let p = self.value();
            elementwise_check("bce", &p, target)?;
            bce_raw(p.data(), target.data())
        };
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::Bce {
                input: self.id,
                target: target.clone(),
            },
            self.requires_grad(),
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_raw(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| data[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..len {
                let e = (data[idx(l)] - max).exp();
                out[idx(l)] = e;
                z += e;
            }
            for l in 0..len {
                out[idx(l)] /= z;
            }
        }
    }
    out
}

/// Cosine similarity of two slices; 0 when either has zero norm.
pub fn cosine_raw(x: &[f64], y: &[f64]) -> f64 {
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / (nx * ny)
}

pub(crate) fn bce_raw(p: &[f64], t: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / p.len() as f64
}
