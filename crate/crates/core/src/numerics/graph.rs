//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every builder method computes its node's value immediately, so shape and
//! finiteness errors surface at the node that caused them. The graph keeps the
//! op list, which lets [`Graph::evaluate`] recompute everything from the leaves
//! after [`Graph::set_leaf`].

use std::collections::HashSet;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param(String),
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ColMean(NodeId),
    ColNorm(NodeId),
    SubRow(NodeId, NodeId),
    Outer(NodeId, NodeId),
    LogSoftmax(NodeId),
    Nll(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Square(_) => "square",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ColMean(_) => "col_mean",
            Op::ColNorm(_) => "col_norm",
            Op::SubRow(..) => "sub_row",
            Op::Outer(..) => "outer",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Nll(..) => "nll",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Param(_) | Op::Constant)
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_names: HashSet<String>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Smallest `|x|` fed into any ReLU (∞ without ReLUs). Finite-difference
    /// checks are only meaningful when this is well above the step size.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Trainable leaf. Names must be unique within a graph.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        let name = name.into();
        if !self.param_names.insert(name.clone()) {
            return Err(Error::contract(format!("parameter `{name}` bound twice")));
        }
        Ok(self.push_leaf(Op::Param(name), value))
    }

    /// Binds every entry of `params` as a trainable leaf, in order.
    pub fn params(&mut self, params: &ParamSet) -> Result<Vec<NodeId>> {
        params
            .iter()
            .map(|(k, v)| self.param(k, v.clone()))
            .collect()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Constant, value)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
            value,
        });
        id
    }

    /// Replaces a leaf's value; the shape must not change. Call
    /// [`Graph::evaluate`] afterwards to refresh downstream values.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !node.op.is_leaf() {
            return Err(Error::contract(format!("node {} is not a leaf", id.0)));
        }
        if node.shape != value.shape() {
            return Err(Error::Shape {
                node: id.0,
                op: node.op.name(),
                detail: format!("leaf shape {:?} cannot take {:?}", node.shape, value.shape()),
            });
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let index = self.nodes.len();
        let value = compute(index, &op, &self.nodes)?;
        self.nodes.push(Node {
            shape: value.shape().to_vec(),
            op,
            value,
        });
        Ok(NodeId(index))
    }

    /// `(n×k) · (k×m)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    /// `(n×m) + [m]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> Result<NodeId> {
        self.push(Op::Offset(a, shift))
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() || shape.contains(&0) {
            return Err(Error::Shape {
                node: self.nodes.len(),
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.nodes[a.0].shape),
            });
        }
        let index = self.nodes.len();
        let value = Tensor::from_parts(shape.clone(), self.nodes[a.0].value.data().to_vec());
        self.nodes.push(Node {
            op: Op::Reshape(a),
            shape,
            value,
        });
        Ok(NodeId(index))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    /// Per-column mean of an `n×m` matrix, shape `[m]`.
    pub fn col_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::ColMean(a))
    }

    /// Per-column Euclidean norm `√Σ_b a_{b,j}²`, shape `[m]`. The derivative
    /// of a zero-norm column is taken as 0.
    pub fn col_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::ColNorm(a))
    }

    /// `(n×m) − [m]`, broadcasting the row.
    pub fn sub_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::SubRow(a, row))
    }

    /// `[n] ⊗ [m] → n×m`.
    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        self.push(Op::Outer(u, v))
    }

    /// Row-wise log-softmax of an `n×m` matrix.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax(a))
    }

    /// Mean negative log-likelihood `−(1/n) Σᵢ log max(Pᵢ,yᵢ, 1e-12)` of an
    /// `n×m` matrix of log-probabilities.
    pub fn nll(&mut self, log_probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::Nll(log_probs, labels.to_vec()))
    }

    /// Recomputes every node from the current leaf values and returns the
    /// value at `root`.
    pub fn evaluate(&mut self, root: NodeId) -> Result<Tensor> {
        for index in 0..=root.0 {
            if self.nodes[index].op.is_leaf() {
                continue;
            }
            let value = match &self.nodes[index].op {
                Op::Reshape(a) => Tensor::from_parts(
                    self.nodes[index].shape.clone(),
                    self.nodes[a.0].value.data().to_vec(),
                ),
                op => compute(index, op, &self.nodes)?,
            };
            self.nodes[index].value = value;
        }
        Ok(self.nodes[root.0].value.clone())
    }

    /// Gradient of the scalar `root` with respect to every parameter leaf, in
    /// binding order. Parameters that do not influence `root` get zeros.
    pub fn backward(&self, root: NodeId) -> Result<ParamSet> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, node {} has shape {:?}",
                root.0,
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for index in (0..=root.0).rev() {
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            if let Op::Param(_) | Op::Constant = node.op {
                grads[index] = Some(upstream);
                continue;
            }
            for (parent, contrib) in self.local_grads(node, &upstream) {
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = ParamSet::new();
        for (index, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let data = grads
                    .get_mut(index)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                out.insert(name.clone(), Tensor::from_parts(node.shape.clone(), data));
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products of one node with respect to its parents.
    fn local_grads(&self, node: &Node, up: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Param(_) | Op::Constant => Vec::new(),
            Op::MatMul(a, b) => {
                let (n, k) = val(*a).dims2().unwrap();
                let (_, m) = val(*b).dims2().unwrap();
                let da = matmul_a_bt(up, val(*b).data(), n, m, k);
                let db = matmul_at_b(val(*a).data(), up, n, k, m);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => {
                let (n, m) = val(*a).dims2().unwrap();
                vec![(*a, transpose(up, m, n))]
            }
            Op::AddBias(a, bias) => {
                let m = val(*bias).len();
                let mut db = vec![0.0; m];
                for row in up.chunks_exact(m) {
                    for (d, u) in db.iter_mut().zip(row) {
                        *d += u;
                    }
                }
                vec![(*a, up.to_vec()), (*bias, db)]
            }
            Op::Add(a, b) => vec![(*a, up.to_vec()), (*b, up.to_vec())],
            Op::Sub(a, b) => vec![(*a, up.to_vec()), (*b, up.iter().map(|u| -u).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, up.iter().zip(vb).map(|(u, y)| u * y).collect()),
                    (*b, up.iter().zip(va).map(|(u, x)| u * x).collect()),
                ]
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let da = up.iter().zip(vb).map(|(u, y)| u / y).collect();
                let db = up
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(u, (x, y))| -u * x / (y * y))
                    .collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, f) => vec![(*a, up.iter().map(|u| u * f).collect())],
            Op::Offset(a, _) | Op::Reshape(a) => vec![(*a, up.to_vec())],
            Op::Relu(a) => {
                let d = up
                    .iter()
                    .zip(val(*a).data())
                    .map(|(u, &x)| if x > 0.0 { *u } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::Tanh(a) => {
                let d = up
                    .iter()
                    .zip(node.value.data())
                    .map(|(u, t)| u * (1.0 - t * t))
                    .collect();
                vec![(*a, d)]
            }
            Op::Square(a) => {
                let d = up
                    .iter()
                    .zip(val(*a).data())
                    .map(|(u, x)| 2.0 * u * x)
                    .collect();
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, vec![up[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![up[0] / n as f64; n])]
            }
            Op::ColMean(a) => {
                let (n, m) = val(*a).dims2().unwrap();
                let mut d = Vec::with_capacity(n * m);
                for _ in 0..n {
                    d.extend(up.iter().map(|u| u / n as f64));
                }
                vec![(*a, d)]
            }
            Op::ColNorm(a) => {
                let (_, m) = val(*a).dims2().unwrap();
                let norms = node.value.data();
                let d = val(*a)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let j = i % m;
                        if norms[j] > 0.0 {
                            up[j] * x / norms[j]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*a, d)]
            }
            Op::SubRow(a, row) => {
                let m = val(*row).len();
                let mut dr = vec![0.0; m];
                for chunk in up.chunks_exact(m) {
                    for (d, u) in dr.iter_mut().zip(chunk) {
                        *d -= u;
                    }
                }
                vec![(*a, up.to_vec()), (*row, dr)]
            }
            Op::Outer(u, v) => {
                let (vu, vv) = (val(*u).data(), val(*v).data());
                let m = vv.len();
                let du = up.chunks_exact(m).map(|r| dot(r, vv)).collect();
                let mut dv = vec![0.0; m];
                for (row, &ui) in up.chunks_exact(m).zip(vu) {
                    for (d, g) in dv.iter_mut().zip(row) {
                        *d += g * ui;
                    }
                }
                vec![(*u, du), (*v, dv)]
            }
            Op::LogSoftmax(a) => {
                let (_, m) = val(*a).dims2().unwrap();
                let mut d = Vec::with_capacity(up.len());
                for (urow, lrow) in up.chunks_exact(m).zip(node.value.data().chunks_exact(m)) {
                    let total: f64 = urow.iter().sum();
                    d.extend(urow.iter().zip(lrow).map(|(u, l)| u - l.exp() * total));
                }
                vec![(*a, d)]
            }
            Op::Nll(a, labels) => {
                let (n, m) = val(*a).dims2().unwrap();
                let floor = PROB_FLOOR.ln();
                let mut d = vec![0.0; n * m];
                for (i, &y) in labels.iter().enumerate() {
                    if val(*a).data()[i * m + y] > floor {
                        d[i * m + y] = -up[0] / n as f64;
                    }
                }
                vec![(*a, d)]
            }
        }
    }
}

fn compute(index: usize, op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let name = op.name();
    let shape_err = |detail: String| Error::Shape {
        node: index,
        op: name,
        detail,
    };
    let val = |id: &NodeId| &nodes[id.0].value;
    let same_shape = |a: &NodeId, b: &NodeId| -> Result<()> {
        if val(a).shape() == val(b).shape() {
            Ok(())
        } else {
            Err(shape_err(format!("{:?} vs {:?}", val(a).shape(), val(b).shape())))
        }
    };
    let matrix = |a: &NodeId| -> Result<(usize, usize)> {
        val(a)
            .dims2()
            .ok_or_else(|| shape_err(format!("expected a matrix, got {:?}", val(a).shape())))
    };
    let elementwise = |a: &NodeId, b: &NodeId, f: fn(f64, f64) -> f64| -> Result<Tensor> {
        same_shape(a, b)?;
        let data = val(a).data().iter().zip(val(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(val(a).shape().to_vec(), data))
    };
    let unary = |a: &NodeId, f: &dyn Fn(f64) -> f64| -> Tensor { val(a).map(f) };

    let out = match op {
        Op::Param(_) | Op::Constant => unreachable!("leaves are never recomputed"),
        Op::MatMul(a, b) => {
            let (n, k) = matrix(a)?;
            let (k2, m) = matrix(b)?;
            if k != k2 {
                return Err(shape_err(format!("({n}×{k}) · ({k2}×{m})")));
            }
            Tensor::from_parts(vec![n, m], matmul(val(a).data(), val(b).data(), n, k, m))
        }
        Op::Transpose(a) => {
            let (n, m) = matrix(a)?;
            Tensor::from_parts(vec![m, n], transpose(val(a).data(), n, m))
        }
        Op::AddBias(a, bias) => {
            let (_, m) = matrix(a)?;
            if val(bias).shape() != [m] {
                return Err(shape_err(format!(
                    "bias {:?} for {:?}",
                    val(bias).shape(),
                    val(a).shape()
                )));
            }
            let b = val(bias).data();
            let mut data = val(a).data().to_vec();
            for row in data.chunks_exact_mut(m) {
                for (x, bb) in row.iter_mut().zip(b) {
                    *x += bb;
                }
            }
            Tensor::from_parts(vec![val(a).shape()[0], m], data)
        }
        Op::Add(a, b) => elementwise(a, b, |x, y| x + y)?,
        Op::Sub(a, b) => elementwise(a, b, |x, y| x - y)?,
        Op::Mul(a, b) => elementwise(a, b, |x, y| x * y)?,
        Op::Div(a, b) => elementwise(a, b, |x, y| x / y)?,
        Op::Scale(a, f) => unary(a, &|x| x * f),
        Op::Offset(a, s) => unary(a, &|x| x + s),
        Op::Relu(a) => unary(a, &|x| if x > 0.0 { x } else { 0.0 }),
        Op::Tanh(a) => unary(a, &f64::tanh),
        Op::Square(a) => unary(a, &|x| x * x),
        Op::Reshape(_) => unreachable!("reshape is handled by the builder"),
        Op::Sum(a) => Tensor::scalar(val(a).data().iter().sum()),
        Op::Mean(a) => Tensor::scalar(val(a).data().iter().sum::<f64>() / val(a).len() as f64),
        Op::ColMean(a) => {
            let (n, m) = matrix(a)?;
            let mut data = column_sums(val(a).data(), m, |x| x);
            data.iter_mut().for_each(|s| *s /= n as f64);
            Tensor::from_parts(vec![m], data)
        }
        Op::ColNorm(a) => {
            let (_, m) = matrix(a)?;
            let mut data = column_sums(val(a).data(), m, |x| x * x);
            data.iter_mut().for_each(|s| *s = s.sqrt());
            Tensor::from_parts(vec![m], data)
        }
        Op::SubRow(a, row) => {
            let (n, m) = matrix(a)?;
            if val(row).shape() != [m] {
                return Err(shape_err(format!(
                    "row {:?} for {:?}",
                    val(row).shape(),
                    val(a).shape()
                )));
            }
            let r = val(row).data();
            let mut data = val(a).data().to_vec();
            for chunk in data.chunks_exact_mut(m) {
                for (x, rr) in chunk.iter_mut().zip(r) {
                    *x -= rr;
                }
            }
            Tensor::from_parts(vec![n, m], data)
        }
        Op::Outer(u, v) => {
            if val(u).rank() != 1 || val(v).rank() != 1 {
                return Err(shape_err(format!(
                    "outer needs vectors, got {:?} and {:?}",
                    val(u).shape(),
                    val(v).shape()
                )));
            }
            let (vu, vv) = (val(u).data(), val(v).data());
            let data = vu.iter().flat_map(|x| vv.iter().map(move |y| x * y)).collect();
            Tensor::from_parts(vec![vu.len(), vv.len()], data)
        }
        Op::LogSoftmax(a) => {
            let (n, m) = matrix(a)?;
            let mut data = Vec::with_capacity(n * m);
            for row in val(a).data().chunks_exact(m) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                data.extend(row.iter().map(|x| x - lse));
            }
            Tensor::from_parts(vec![n, m], data)
        }
        Op::Nll(a, labels) => {
            let (n, m) = matrix(a)?;
            if labels.len() != n {
                return Err(shape_err(format!("{} labels for {n} rows", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
                return Err(Error::contract(format!(
                    "label {bad} out of range for {m} classes"
                )));
            }
            let floor = PROB_FLOOR.ln();
            let data = val(a).data();
            let total: f64 = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| -data[i * m + y].max(floor))
                .sum();
            Tensor::scalar(total / n as f64)
        }
    };
    if !out.all_finite() {
        return Err(Error::NonFinite { node: index, op: name });
    }
    Ok(out)
}

fn column_sums(data: &[f64], m: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut sums = vec![0.0; m];
    for row in data.chunks_exact(m) {
        for (s, &x) in sums.iter_mut().zip(row) {
            *s += f(x);
        }
    }
    sums
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// `(n×k)(k×m)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (&x, brow) in arow.iter().zip(b.chunks_exact(m)) {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

/// `(n×m)(k×m)ᵀ → n×k`.
fn matmul_a_bt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * k);
    for arow in a.chunks_exact(m) {
        out.extend(b.chunks_exact(m).map(|brow| dot(arow, brow)));
    }
    debug_assert_eq!(out.len(), n * k);
    out
}

/// `(n×k)ᵀ(n×m) → k×m`.
fn matmul_at_b(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out[p * m..(p + 1) * m].iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn scalar_graph(w: f64) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new();
        let p = g.param("w", Tensor::scalar(w)).unwrap();
        let sq = g.square(p).unwrap();
        (g, p, sq)
    }

    #[test]
    fn constant_arithmetic() {
        let mut g = Graph::new();
        let two = g.constant(Tensor::scalar(2.0));
        let three = g.constant(Tensor::scalar(3.0));
        let prod = g.mul(two, three).unwrap();
        let out = g.offset(prod, 1.0).unwrap();
        assert_eq!(g.evaluate(out).unwrap().item().unwrap(), 7.0);
    }

    #[test]
    fn identity_graph_is_bit_identical() {
        let t = Tensor::new(vec![2, 2], vec![0.1, -0.0, 1e-300, 3.0]).unwrap();
        let mut g = Graph::new();
        let id = g.constant(t.clone());
        let r = g.reshape(id, vec![2, 2]).unwrap();
        assert!(g.evaluate(r).unwrap().bits_eq(&t));
    }

    #[test]
    fn square_gradient() {
        let (g, _, sq) = scalar_graph(3.0);
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get("w").unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut g = Graph::new();
        g.param("w", Tensor::zeros(vec![2, 3])).unwrap();
        let c = g.constant(Tensor::scalar(5.0));
        let grads = g.backward(c).unwrap();
        let gw = grads.get("w").unwrap();
        assert_eq!(gw.shape(), &[2, 3]);
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let p = g.param("w", Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_a_numeric_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let z = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.div(a, z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn duplicate_param_names_are_rejected() {
        let mut g = Graph::new();
        g.param("w", Tensor::scalar(1.0)).unwrap();
        assert!(g.param("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn mean_squared_residual_matches_straight_line_code() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut rand3x3 = || {
            Tensor::new(vec![3, 3], (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (a, b, c) = (rand3x3(), rand3x3(), rand3x3());

        let mut g = Graph::new();
        let (na, nb, nc) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(c.clone()));
        let ab = g.matmul(na, nb).unwrap();
        let r = g.sub(ab, nc).unwrap();
        let sq = g.square(r).unwrap();
        let loss = g.mean(sq).unwrap();
        let got = g.evaluate(loss).unwrap().item().unwrap();

        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.data()[i * 3 + k] * b.data()[k * 3 + j];
                }
                let d = s - c.data()[i * 3 + j];
                expected += d * d;
            }
        }
        expected /= 9.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn evaluate_after_set_leaf_recomputes() {
        let (mut g, p, sq) = scalar_graph(3.0);
        g.set_leaf(p, Tensor::scalar(-2.0)).unwrap();
        assert_eq!(g.evaluate(sq).unwrap().item().unwrap(), 4.0);
        assert!(g.set_leaf(sq, Tensor::scalar(1.0)).is_err());
        assert!(g.set_leaf(p, Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut g = Graph::new();
        let p = g.param("w", Tensor::vector(vec![0.0, 1.0, -1.0])).unwrap();
        let r = g.relu(p).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn nll_clamps_impossible_labels() {
        let mut g = Graph::new();
        let lp = g.param("lp", Tensor::matrix(&[&[0.0, -1e6]])).unwrap();
        let l = g.nll(lp, &[1]).unwrap();
        let v = g.value(l).item().unwrap();
        assert!((v + PROB_FLOOR.ln()).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        assert!(grads.get("lp").unwrap().data().iter().all(|&d| d == 0.0));
        assert!(g.nll(lp, &[2]).is_err());
    }

    /// Every op's backward rule against central differences on one composite.
    #[test]
    fn every_op_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        for seed in 0..20 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rand = |shape: Vec<usize>| {
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            };
            let mut params = ParamSet::new();
            params.insert("a", rand(vec![3, 4]));
            params.insert("b", rand(vec![4, 2]));
            params.insert("bias", rand(vec![2]));
            params.insert("c", rand(vec![3, 2]));
            let build = |p: &ParamSet| -> Result<(Graph, NodeId)> {
                let mut g = Graph::new();
                let ids = g.params(p)?;
                let (a, b, bias, c) = (ids[0], ids[1], ids[2], ids[3]);
                let ab = g.matmul(a, b)?;
                let h = g.add_bias(ab, bias)?;
                let t = g.tanh(h)?;
                let r = g.relu(c)?;
                let m = g.mul(t, r)?;
                let mixed = g.add(m, c)?;
                let mu = g.col_mean(mixed)?;
                let centered = g.sub_row(mixed, mu)?;
                let norms = g.col_norm(centered)?;
                let outer = g.outer(norms, norms)?;
                let eps = g.offset(outer, 1.0)?;
                let ct = g.transpose(centered)?;
                let cc = g.matmul(ct, centered)?;
                let ratio = g.div(cc, eps)?;
                let lsm = g.log_softmax(mixed)?;
                let nll = g.nll(lsm, &[0, 1, 1])?;
                let sq = g.square(ratio)?;
                let flat = g.reshape(sq, vec![4])?;
                let s = g.sum(flat)?;
                let sc = g.scale(s, 0.3)?;
                let dif = g.sub(sc, nll)?;
                let mean_c = g.mean(c)?;
                let out = g.add(dif, mean_c)?;
                Ok((g, out))
            };
            let (g, root) = build(&params).unwrap();
            let analytic = g.backward(root).unwrap();
            let numeric = finite_diff_grad(
                |p| {
                    let (g, r) = build(p)?;
                    g.value(r).item()
                },
                &params,
                1e-5,
            )
            .unwrap();
            let err = crate::numerics::max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }
}
