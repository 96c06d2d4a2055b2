//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape of operator nodes. Every node caches
//! its forward value, and input ids always precede the node that consumes
//! them, so [`Graph::backward`] is a single sweep in reverse insertion order.
//!
//! The operator set is deliberately small: it covers dense MLP layers over a
//! batch, the usual activations, softmax cross-entropy, and the reductions
//! needed to express regularizers and the invariance penalty. There is no
//! general broadcasting; the one broadcast that a layer needs (adding a bias
//! row to every batch row) is its own operator.
//!
//! ```
//! use fedgen_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.parameter(Tensor::scalar(3.0).unwrap());
//! let y = g.square(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Single value of a scalar-shaped tensor.
    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    // Op outputs are checked for finiteness by the graph, so internal
    // construction skips the check here.
    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// Identifier of a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Operator tags understood by [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Parameter or constant input; never produced by `apply`.
    Leaf,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// `(m×n) · (n) → (m)`.
    MatVec,
    /// Batched matrix-vector product: `(b×n) · (m×n)ᵀ → (b×m)`.
    MatMulT,
    /// Adds a length-`m` bias to every row of a `(b×m)` matrix.
    AddBias,
    Relu,
    Sigmoid,
    /// Softmax over the last axis of a vector or matrix.
    Softmax,
    /// Negative log-likelihood of the target class under softmax, one value
    /// per row (or a scalar for vector logits).
    SoftmaxCrossEntropy(Vec<usize>),
    Dot,
    Square,
    Sum,
    Scale(f64),
    L1Norm,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::MatVec => "matvec",
            Op::MatMulT => "matmul_t",
            Op::AddBias => "add_bias",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            Op::Dot => "dot",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Scale(_) => "scale",
            Op::L1Norm => "l1_norm",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::Add | Op::Sub | Op::Mul | Op::MatVec | Op::MatMulT | Op::AddBias | Op::Dot => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    roots: Vec<NodeId>,
}

/// Gradients of a scalar loss with respect to every parameter node.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(BTreeMap<NodeId, Tensor>);

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Tensor> {
        self.0.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a differentiable leaf.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, Vec::new(), value, true);
        self.roots.push(id);
        id
    }

    /// Adds a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, false)
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn try_value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(id.0))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        id
    }

    /// Evaluates `op` on the cached values of `inputs` and appends the node.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if op == Op::Leaf {
            return Err(Error::invalid("leaf nodes are created with parameter() or constant()"));
        }
        if inputs.len() != op.arity() {
            return Err(Error::Arity {
                op: op.name(),
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(id.0));
            }
        }
        let args: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(&op, &args)?;
        check_finite(value.data())?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.apply(Op::MatVec, &[w, x])
    }

    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMulT, &[x, w])
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::AddBias, &[x, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.apply(Op::SoftmaxCrossEntropy(targets.to_vec()), &[logits])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Dot, &[a, b])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Square, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite {
                index: 0,
                value: factor,
            });
        }
        self.apply(Op::Scale(factor), &[x])
    }

    pub fn l1_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::L1Norm, &[x])
    }

    /// Returns `∂loss/∂p` for every parameter node `p`.
    ///
    /// Nodes are visited in strict reverse insertion order and gradients are
    /// accumulated in a fixed order, so the result is bitwise reproducible.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_node = self.nodes.get(loss.0).ok_or(Error::UnknownNode(loss.0))?;
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.op == Op::Leaf || !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let args: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let wanted: Vec<bool> = node
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].requires_grad)
                .collect();
            let input_grads = backward_op(&node.op, &args, &node.value, &upstream, &wanted);
            for ((input, wanted), g) in node.inputs.iter().zip(wanted).zip(input_grads) {
                if !wanted {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = BTreeMap::new();
        for &root in &self.roots {
            if root.0 > loss.0 {
                continue;
            }
            let shape = self.nodes[root.0].value.shape().to_vec();
            let data = grads[root.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[root.0].value.len()]);
            out.insert(root, Tensor::from_parts(shape, data));
        }
        Ok(Gradients(out))
    }
}

fn mismatch(op: &Op, args: &[&Tensor]) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        shapes: args.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Splits a vector or matrix into `(rows, cols)` over its last axis.
fn rows_cols(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [c] if *c > 0 => Some((1, *c)),
        [r, c] if *c > 0 => Some((*r, *c)),
        _ => None,
    }
}

fn forward(op: &Op, args: &[&Tensor]) -> Result<Tensor> {
    let out = match op {
        Op::Leaf => unreachable!("leaf nodes are never applied"),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (args[0], args[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, args));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::MatVec => {
            let (w, x) = (args[0], args[1]);
            let (m, n) = match (w.shape(), x.shape()) {
                ([m, n], [k]) if n == k => (*m, *n),
                _ => return Err(mismatch(op, args)),
            };
            let data = (0..m)
                .map(|i| dot(&w.data()[i * n..(i + 1) * n], x.data()))
                .collect();
            Tensor::from_parts(vec![m], data)
        }
        Op::MatMulT => {
            let (x, w) = (args[0], args[1]);
            let (b, m, n) = match (x.shape(), w.shape()) {
                ([b, n], [m, k]) if n == k => (*b, *m, *n),
                _ => return Err(mismatch(op, args)),
            };
            let mut data = vec![0.0; b * m];
            for r in 0..b {
                let xr = &x.data()[r * n..(r + 1) * n];
                for i in 0..m {
                    data[r * m + i] = dot(xr, &w.data()[i * n..(i + 1) * n]);
                }
            }
            Tensor::from_parts(vec![b, m], data)
        }
        Op::AddBias => {
            let (x, bias) = (args[0], args[1]);
            let m = match (x.shape(), bias.shape()) {
                ([_, m], [k]) if m == k => *m,
                _ => return Err(mismatch(op, args)),
            };
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(m.max(1)) {
                row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::Relu => map(args[0], |v| v.max(0.0)),
        Op::Sigmoid => map(args[0], sigmoid),
        Op::Square => map(args[0], |v| v * v),
        Op::Scale(c) => map(args[0], |v| v * c),
        Op::Softmax => {
            let x = args[0];
            let (_, c) = rows_cols(x).ok_or_else(|| mismatch(op, args))?;
            let mut data = vec![0.0; x.len()];
            for (row, out) in x.data().chunks(c).zip(data.chunks_mut(c)) {
                softmax_row(row, out);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::SoftmaxCrossEntropy(targets) => {
            let x = args[0];
            let (rows, c) = rows_cols(x).ok_or_else(|| mismatch(op, args))?;
            if targets.len() != rows {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    shapes: vec![x.shape().to_vec(), vec![targets.len()]],
                });
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
                return Err(Error::TargetOutOfRange {
                    op: op.name(),
                    target: bad,
                    classes: c,
                });
            }
            let data: Vec<f64> = x
                .data()
                .chunks(c)
                .zip(targets)
                .map(|(row, &t)| (log_sum_exp(row) - row[t]).max(0.0))
                .collect();
            let shape = if x.shape().len() == 1 {
                Vec::new()
            } else {
                vec![rows]
            };
            Tensor::from_parts(shape, data)
        }
        Op::Dot => {
            let (a, b) = (args[0], args[1]);
            match (a.shape(), b.shape()) {
                ([n], [k]) if n == k => {}
                _ => return Err(mismatch(op, args)),
            }
            Tensor::from_parts(Vec::new(), vec![dot(a.data(), b.data())])
        }
        Op::Sum => Tensor::from_parts(Vec::new(), vec![args[0].data().iter().sum()]),
        Op::L1Norm => Tensor::from_parts(Vec::new(), vec![args[0].data().iter().map(|v| v.abs()).sum()]),
    };
    Ok(out)
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Vector-Jacobian products for one node. Entries for inputs that do not
/// need a gradient are left as `None`.
fn backward_op(op: &Op, args: &[&Tensor], out: &Tensor, g: &[f64], wanted: &[bool]) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| wanted[i];
    match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Op::Sub => vec![
            want(0).then(|| g.to_vec()),
            want(1).then(|| g.iter().map(|v| -v).collect()),
        ],
        Op::Mul => {
            let (a, b) = (args[0].data(), args[1].data());
            vec![
                want(0).then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                want(1).then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::MatVec => {
            let (w, x) = (args[0], args[1]);
            let n = x.len();
            let gw = want(0).then(|| {
                let mut gw = vec![0.0; w.len()];
                for (i, gi) in g.iter().enumerate() {
                    for (dst, xj) in gw[i * n..(i + 1) * n].iter_mut().zip(x.data()) {
                        *dst = gi * xj;
                    }
                }
                gw
            });
            let gx = want(1).then(|| {
                let mut gx = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    axpy(*gi, &w.data()[i * n..(i + 1) * n], &mut gx);
                }
                gx
            });
            vec![gw, gx]
        }
        Op::MatMulT => {
            let (x, w) = (args[0], args[1]);
            let (b, n) = (x.shape()[0], x.shape()[1]);
            let m = w.shape()[0];
            let gx = want(0).then(|| {
                let mut gx = vec![0.0; b * n];
                for r in 0..b {
                    let dst = &mut gx[r * n..(r + 1) * n];
                    for i in 0..m {
                        axpy(g[r * m + i], &w.data()[i * n..(i + 1) * n], dst);
                    }
                }
                gx
            });
            let gw = want(1).then(|| {
                let mut gw = vec![0.0; m * n];
                for r in 0..b {
                    let xr = &x.data()[r * n..(r + 1) * n];
                    for i in 0..m {
                        axpy(g[r * m + i], xr, &mut gw[i * n..(i + 1) * n]);
                    }
                }
                gw
            });
            vec![gx, gw]
        }
        Op::AddBias => {
            let m = args[1].len();
            let gb = want(1).then(|| {
                let mut gb = vec![0.0; m];
                for row in g.chunks(m.max(1)) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                gb
            });
            vec![want(0).then(|| g.to_vec()), gb]
        }
        Op::Relu => vec![Some(
            g.iter()
                .zip(args[0].data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Op::Sigmoid => vec![Some(
            g.iter()
                .zip(out.data())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect(),
        )],
        Op::Softmax => {
            let c = *out.shape().last().unwrap_or(&1);
            let mut gx = vec![0.0; out.len()];
            for ((p, gr), dst) in out.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                let inner = dot(p, gr);
                for ((d, pi), gi) in dst.iter_mut().zip(p).zip(gr) {
                    *d = pi * (gi - inner);
                }
            }
            vec![Some(gx)]
        }
        Op::SoftmaxCrossEntropy(targets) => {
            let x = args[0];
            let c = *x.shape().last().unwrap_or(&1);
            let mut gx = vec![0.0; x.len()];
            for (((row, dst), &t), gr) in x.data().chunks(c).zip(gx.chunks_mut(c)).zip(targets).zip(g) {
                softmax_row(row, dst);
                dst[t] -= 1.0;
                dst.iter_mut().for_each(|d| *d *= gr);
            }
            vec![Some(gx)]
        }
        Op::Dot => {
            let s = g[0];
            vec![
                want(0).then(|| args[1].data().iter().map(|v| s * v).collect()),
                want(1).then(|| args[0].data().iter().map(|v| s * v).collect()),
            ]
        }
        Op::Square => vec![Some(
            g.iter().zip(args[0].data()).map(|(g, x)| 2.0 * x * g).collect(),
        )],
        Op::Sum => vec![Some(vec![g[0]; args[0].len()])],
        Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Op::L1Norm => vec![Some(args[0].data().iter().map(|&x| g[0] * sign(x)).collect())],
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::DataLength { .. })
        ));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0).unwrap());
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).item(), Some(0.5));
    }

    #[test]
    fn add_and_identity_matvec() {
        let mut g = Graph::new();
        let a = g.constant(vec_t(&[1.0, 2.0]));
        let b = g.constant(vec_t(&[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = g.constant(vec_t(&[5.0, 7.0]));
        let y = g.matvec(eye, x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_operator() {
        let mut g = Graph::new();
        let a = g.constant(vec_t(&[1.0, 2.0]));
        let b = g.constant(vec_t(&[1.0, 2.0, 3.0]));
        match g.add(a, b) {
            Err(Error::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2], vec![3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = g.matvec(a, b).unwrap_err().to_string();
        assert!(err.contains("matvec"), "{err}");
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(3.0).unwrap());
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let mut g = Graph::new();
        let w = g.parameter(vec_t(&[0.3, -1.2]));
        let x = g.constant(vec_t(&[2.0, 5.0]));
        let y = g.dot(w, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn cross_entropy_uniform_gradient() {
        let mut g = Graph::new();
        let z = g.parameter(vec_t(&[0.0, 0.0]));
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let z = g.parameter(vec_t(&[0.0, 1.0]));
        let r = g.relu(z).unwrap();
        assert!(matches!(g.backward(r), Err(Error::NonScalarLoss(s)) if s == vec![2]));
    }

    #[test]
    fn relu_and_l1_subgradient_at_zero() {
        let mut g = Graph::new();
        let z = g.parameter(vec_t(&[0.0, 2.0, -1.0]));
        let r = g.relu(z).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[0.0, 1.0, 0.0]);

        let mut g = Graph::new();
        let z = g.parameter(vec_t(&[0.0, 2.0, -1.0]));
        let l = g.l1_norm(z).unwrap();
        assert_eq!(g.value(l).item(), Some(3.0));
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.parameter(vec_t(&[1.0, 2.0]));
        let b = g.parameter(vec_t(&[3.0]));
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn finite_difference_oracle() {
        let x = Tensor::scalar(3.0).unwrap();
        let d = finite_diff_gradient(|t| t.data()[0] * t.data()[0], &x, 1e-4);
        assert!((d.data()[0] - 6.0).abs() < 1e-6);

        let x = vec_t(&[1.0, -2.0, 0.5]);
        let d = finite_diff_gradient(|_| 4.2, &x, 1e-4);
        assert_eq!(d.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_is_negative_log_probability() {
        let logits = [0.3, -1.7, 2.2, 0.0];
        let mut g = Graph::new();
        let z = g.constant(vec_t(&logits));
        let p = g.softmax(z).unwrap();
        for t in 0..4 {
            let l = g.softmax_cross_entropy(z, &[t]).unwrap();
            let expected = -g.value(p).data()[t].ln();
            assert!((g.value(l).item().unwrap() - expected).abs() < 1e-12);
        }
    }
}
