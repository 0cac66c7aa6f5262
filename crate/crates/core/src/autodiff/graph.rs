//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.
//! Gradients accumulate additively across fan-out.

use std::collections::BTreeMap;

use super::array::{gemm_nn, gemm_nt, gemm_tn};
use super::{Array, AutodiffError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds. Binary elementwise ops (`Add`, `Sub`, `Mul`) broadcast
/// their second operand when it is a scalar or a row vector matching the
/// trailing dimension of the first.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Shift(f64),
    Sigmoid,
    Tanh,
    Softplus,
    Log,
    Square,
    Sum,
    Mean,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Row-wise `xᵢᵀ M yᵢ`, producing a `[B, 1]` column.
    Bilinear,
    /// Embedding lookup: rows of the input table at the given ids.
    GatherRows(Vec<usize>),
    /// Row `i` comes from the first input when `mask[i]`, else the second.
    SelectRows(Vec<bool>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softplus => "softplus",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Bilinear => "bilinear",
            Op::GatherRows(_) => "gather_rows",
            Op::SelectRows(_) => "select_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::SelectRows(_) => Some(2),
            Op::Bilinear => Some(3),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Param,
    Constant,
    Op(Op),
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
    parents: Vec<NodeId>,
    value: Array,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    grads: Vec<Option<Array>>,
}

/// Gradients of a scalar root with respect to every named parameter.
pub type Gradients = BTreeMap<String, Array>;

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

    /// Registers a named differentiable leaf.
    pub fn param(
        &mut self,
        name: impl Into<String>,
        value: Array,
    ) -> Result<NodeId, AutodiffError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let id = self.push(NodeKind::Param, Vec::new(), value, true);
        self.params.insert(name, id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(NodeKind::Constant, Vec::new(), value, false)
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn push(
        &mut self,
        kind: NodeKind,
        parents: Vec<NodeId>,
        value: Array,
        requires_grad: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            kind,
            parents,
            value,
            requires_grad,
        });
        id
    }

    /// Appends an operation node, evaluating it eagerly.
    pub fn build(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(AutodiffError::Arity {
                    op: op.name(),
                    expected: n,
                    got: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected: 1,
                got: 0,
            });
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(AutodiffError::UnknownNode(bad.0));
        }
        let value = {
            let vals: Vec<&Array> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            forward(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(NodeKind::Op(op), inputs.to_vec(), value, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        self.build(Op::Scale(factor), &[a])
    }
    pub fn shift(&mut self, a: NodeId, offset: f64) -> Result<NodeId, AutodiffError> {
        self.build(Op::Shift(offset), &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::Tanh, &[a])
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::Softplus, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::Log, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::Square, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::Mean, &[a])
    }
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, AutodiffError> {
        self.build(Op::Concat { axis }, inputs)
    }
    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, AutodiffError> {
        self.build(Op::Slice { axis, start, len }, &[a])
    }
    pub fn bilinear(&mut self, x: NodeId, m: NodeId, y: NodeId) -> Result<NodeId, AutodiffError> {
        self.build(Op::Bilinear, &[x, m, y])
    }
    pub fn gather_rows(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId, AutodiffError> {
        self.build(Op::GatherRows(ids), &[table])
    }
    pub fn select_rows(
        &mut self,
        mask: Vec<bool>,
        a: NodeId,
        b: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        self.build(Op::SelectRows(mask), &[a, b])
    }

    /// Sums a non-empty list of scalar-compatible nodes left to right.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let (&first, rest) = terms.split_first().ok_or(AutodiffError::Arity {
            op: "add_all",
            expected: 1,
            got: 0,
        })?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse sweep from a single-element root. Returns `∂root/∂param` for
    /// every registered parameter (zeros for parameters the root does not
    /// depend on).
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients, AutodiffError> {
        if root.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(root.0));
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let NodeKind::Op(op) = &node.kind {
                let need: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect();
                if need.iter().any(|&b| b) {
                    let inputs: Vec<&Array> = node
                        .parents
                        .iter()
                        .map(|p| &self.nodes[p.0].value)
                        .collect();
                    let contribs = vjp(op, &inputs, &node.value, &gout, &need);
                    for (parent, contrib) in node.parents.iter().zip(contribs) {
                        let Some(contrib) = contrib else { continue };
                        match &mut grads[parent.0] {
                            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
            }
            grads[idx] = Some(gout);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Array::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        let mut out = Gradients::new();
        for (name, &id) in &self.params {
            let g = match self.grads.get(id.0).and_then(Option::as_ref) {
                Some(g) => g.clone(),
                None => Array::zeros(self.nodes[id.0].value.shape()),
            };
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite {
                    context: format!("gradient of {name}"),
                });
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Replaces the value of a named parameter and re-evaluates every
    /// downstream node. Used by the finite-difference oracle.
    pub fn set_param(&mut self, name: &str, value: Array) -> Result<(), AutodiffError> {
        let id = self
            .param_id(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        if value.shape() != self.nodes[id.0].value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_param",
                shapes: vec![
                    self.nodes[id.0].value.shape().to_vec(),
                    value.shape().to_vec(),
                ],
            });
        }
        self.nodes[id.0].value = value;
        self.recompute_from(id.0 + 1)
    }

    fn recompute_from(&mut self, start: usize) -> Result<(), AutodiffError> {
        for idx in start..self.nodes.len() {
            let NodeKind::Op(op) = &self.nodes[idx].kind else {
                continue;
            };
            let value = {
                let vals: Vec<&Array> = self.nodes[idx]
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect();
                forward(op, &vals)?
            };
            self.nodes[idx].value = value;
        }
        self.grads.clear();
        Ok(())
    }
}

enum Broadcast {
    Same,
    Scalar,
    Row,
}

fn broadcast_kind(op: &'static str, a: &Array, b: &Array) -> Result<Broadcast, AutodiffError> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.len() == 1 {
        Ok(Broadcast::Scalar)
    } else if a.rank() == 2 && b.len() == a.cols() && b.rows() == 1 {
        Ok(Broadcast::Row)
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
        })
    }
}

fn elementwise(
    op: &'static str,
    a: &Array,
    b: &Array,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Vec<f64>, AutodiffError> {
    let bd = b.data();
    let out = match broadcast_kind(op, a, b)? {
        Broadcast::Same => a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => a.data().iter().map(|&x| f(x, bd[0])).collect(),
        Broadcast::Row => {
            let n = a.cols();
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % n]))
                .collect()
        }
    };
    Ok(out)
}

/// Reduces a full-shape gradient to the broadcast operand's shape.
fn reduce_broadcast(a: &Array, b: &Array, full: Vec<f64>) -> Vec<f64> {
    match broadcast_kind("reduce", a, b).expect("validated in forward") {
        Broadcast::Same => full,
        Broadcast::Scalar => vec![full.iter().sum()],
        Broadcast::Row => {
            let n = a.cols();
            let mut out = vec![0.0; n];
            for row in full.chunks_exact(n) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            out
        }
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of `softplus` for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inverse needs y > 0");
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

fn as_2d(a: &Array) -> (usize, usize) {
    (a.rows(), a.cols())
}

fn mismatch(op: &'static str, arrays: &[&Array]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: arrays.iter().map(|a| a.shape().to_vec()).collect(),
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), AutodiffError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite {
            context: format!("output of {op}"),
        })
    }
}

fn forward(op: &Op, inputs: &[&Array]) -> Result<Array, AutodiffError> {
    let name = op.name();
    let (shape, data): (Vec<usize>, Vec<f64>) = match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.shape()[0] {
                return Err(mismatch(name, inputs));
            }
            let (m, k, n) = (a.shape()[0], a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            gemm_nn(a.data(), b.data(), &mut out, m, k, n);
            (vec![m, n], out)
        }
        Op::Add => (
            inputs[0].shape().to_vec(),
            elementwise(name, inputs[0], inputs[1], |x, y| x + y)?,
        ),
        Op::Sub => (
            inputs[0].shape().to_vec(),
            elementwise(name, inputs[0], inputs[1], |x, y| x - y)?,
        ),
        Op::Mul => (
            inputs[0].shape().to_vec(),
            elementwise(name, inputs[0], inputs[1], |x, y| x * y)?,
        ),
        Op::Scale(c) => (
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| v * c).collect(),
        ),
        Op::Shift(c) => (
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| v + c).collect(),
        ),
        Op::Sigmoid => (
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|&v| sigmoid(v)).collect(),
        ),
        Op::Tanh => (
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| v.tanh()).collect(),
        ),
        Op::Softplus => (
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|&v| softplus(v)).collect(),
        ),
        Op::Log => {
            if inputs[0].data().iter().any(|&v| v <= 0.0) {
                return Err(AutodiffError::NonFinite {
                    context: "log of non-positive value".to_string(),
                });
            }
            (
                inputs[0].shape().to_vec(),
                inputs[0].data().iter().map(|v| v.ln()).collect(),
            )
        }
        Op::Square => (
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| v * v).collect(),
        ),
        Op::Sum => (vec![1], vec![inputs[0].sum()]),
        Op::Mean => (vec![1], vec![inputs[0].sum() / inputs[0].len() as f64]),
        Op::Concat { axis } => concat_forward(*axis, inputs)?,
        Op::Slice { axis, start, len } => slice_forward(*axis, *start, *len, inputs[0])?,
        Op::Bilinear => {
            let (x, m, y) = (inputs[0], inputs[1], inputs[2]);
            let ((bx, h), (by, k)) = (as_2d(x), as_2d(y));
            if m.rank() != 2
                || x.rank() > 2
                || y.rank() > 2
                || bx != by
                || m.shape()[0] != h
                || m.cols() != k
            {
                return Err(mismatch(name, inputs));
            }
            let mut xm = vec![0.0; bx * k];
            gemm_nn(x.data(), m.data(), &mut xm, bx, h, k);
            let out: Vec<f64> = xm
                .chunks_exact(k)
                .zip(y.data().chunks_exact(k))
                .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                .collect();
            let shape = if x.rank() == 1 && y.rank() == 1 {
                vec![1]
            } else {
                vec![bx, 1]
            };
            (shape, out)
        }
        Op::GatherRows(ids) => {
            let t = inputs[0];
            if t.rank() != 2 {
                return Err(mismatch(name, inputs));
            }
            let (v, e) = (t.shape()[0], t.cols());
            if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
                return Err(AutodiffError::IndexOutOfRange {
                    index: bad,
                    bound: v,
                });
            }
            if ids.is_empty() {
                return Err(AutodiffError::InvalidShape(vec![0, e]));
            }
            let mut out = Vec::with_capacity(ids.len() * e);
            for &i in ids {
                out.extend_from_slice(&t.data()[i * e..(i + 1) * e]);
            }
            (vec![ids.len(), e], out)
        }
        Op::SelectRows(mask) => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() || a.rank() != 2 || a.shape()[0] != mask.len() {
                return Err(mismatch(name, inputs));
            }
            let n = a.cols();
            let mut out = Vec::with_capacity(a.len());
            for (r, &take_a) in mask.iter().enumerate() {
                let src = if take_a { a } else { b };
                out.extend_from_slice(&src.data()[r * n..(r + 1) * n]);
            }
            (a.shape().to_vec(), out)
        }
    };
    check_finite(name, &data)?;
    Ok(Array::from_parts(shape, data))
}

fn concat_forward(axis: usize, inputs: &[&Array]) -> Result<(Vec<usize>, Vec<f64>), AutodiffError> {
    let rank = inputs[0].rank();
    if inputs.iter().any(|a| a.rank() != rank) || rank > 2 || axis >= rank {
        return Err(mismatch("concat", inputs));
    }
    if rank == 1 {
        let data: Vec<f64> = inputs
            .iter()
            .flat_map(|a| a.data().iter().copied())
            .collect();
        return Ok((vec![data.len()], data));
    }
    if axis == 0 {
        let cols = inputs[0].cols();
        if inputs.iter().any(|a| a.cols() != cols) {
            return Err(mismatch("concat", inputs));
        }
        let data: Vec<f64> = inputs
            .iter()
            .flat_map(|a| a.data().iter().copied())
            .collect();
        Ok((vec![data.len() / cols, cols], data))
    } else {
        let rows = inputs[0].shape()[0];
        if inputs.iter().any(|a| a.shape()[0] != rows) {
            return Err(mismatch("concat", inputs));
        }
        let cols: usize = inputs.iter().map(|a| a.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for a in inputs {
                let c = a.cols();
                data.extend_from_slice(&a.data()[r * c..(r + 1) * c]);
            }
        }
        Ok((vec![rows, cols], data))
    }
}

fn slice_forward(
    axis: usize,
    start: usize,
    len: usize,
    a: &Array,
) -> Result<(Vec<usize>, Vec<f64>), AutodiffError> {
    if a.rank() > 2 || axis >= a.rank() || len == 0 || start + len > a.shape()[axis] {
        return Err(AutodiffError::ShapeMismatch {
            op: "slice",
            shapes: vec![a.shape().to_vec(), vec![axis, start, len]],
        });
    }
    if a.rank() == 1 {
        return Ok((vec![len], a.data()[start..start + len].to_vec()));
    }
    let (rows, cols) = (a.shape()[0], a.cols());
    if axis == 0 {
        Ok((
            vec![len, cols],
            a.data()[start * cols..(start + len) * cols].to_vec(),
        ))
    } else {
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&a.data()[r * cols + start..r * cols + start + len]);
        }
        Ok((vec![rows, len], data))
    }
}

/// Vector-Jacobian products for each input whose `need` flag is set.
fn vjp(op: &Op, inputs: &[&Array], out: &Array, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
    let mut res: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.cols(), b.cols());
            if need[0] {
                let mut da = vec![0.0; m * k];
                gemm_nt(g, b.data(), &mut da, m, n, k);
                res[0] = Some(da);
            }
            if need[1] {
                let mut db = vec![0.0; k * n];
                gemm_tn(a.data(), g, &mut db, m, k, n);
                res[1] = Some(db);
            }
        }
        Op::Add | Op::Sub => {
            if need[0] {
                res[0] = Some(g.to_vec());
            }
            if need[1] {
                let full: Vec<f64> = if matches!(op, Op::Sub) {
                    g.iter().map(|v| -v).collect()
                } else {
                    g.to_vec()
                };
                res[1] = Some(reduce_broadcast(inputs[0], inputs[1], full));
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if need[0] {
                let ones = Array::from_parts(a.shape().to_vec(), g.to_vec());
                res[0] = Some(elementwise("mul", &ones, b, |x, y| x * y).expect("validated"));
            }
            if need[1] {
                let full: Vec<f64> = g.iter().zip(a.data()).map(|(x, y)| x * y).collect();
                res[1] = Some(reduce_broadcast(a, b, full));
            }
        }
        Op::Scale(c) => res[0] = Some(g.iter().map(|v| v * c).collect()),
        Op::Shift(_) => res[0] = Some(g.to_vec()),
        Op::Sigmoid => {
            res[0] = Some(
                g.iter()
                    .zip(out.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect(),
            )
        }
        Op::Tanh => {
            res[0] = Some(
                g.iter()
                    .zip(out.data())
                    .map(|(gv, t)| gv * (1.0 - t * t))
                    .collect(),
            )
        }
        Op::Softplus => {
            res[0] = Some(
                g.iter()
                    .zip(inputs[0].data())
                    .map(|(gv, &x)| gv * sigmoid(x))
                    .collect(),
            )
        }
        Op::Log => {
            res[0] = Some(
                g.iter()
                    .zip(inputs[0].data())
                    .map(|(gv, x)| gv / x)
                    .collect(),
            )
        }
        Op::Square => {
            res[0] = Some(
                g.iter()
                    .zip(inputs[0].data())
                    .map(|(gv, x)| 2.0 * gv * x)
                    .collect(),
            )
        }
        Op::Sum => res[0] = Some(vec![g[0]; inputs[0].len()]),
        Op::Mean => {
            let n = inputs[0].len() as f64;
            res[0] = Some(vec![g[0] / n; inputs[0].len()]);
        }
        Op::Concat { axis } => {
            let rank = inputs[0].rank();
            if rank == 1 || *axis == 0 {
                let mut offset = 0;
                for (i, a) in inputs.iter().enumerate() {
                    if need[i] {
                        res[i] = Some(g[offset..offset + a.len()].to_vec());
                    }
                    offset += a.len();
                }
            } else {
                let rows = inputs[0].shape()[0];
                let total: usize = inputs.iter().map(|a| a.cols()).sum();
                let mut col = 0;
                for (i, a) in inputs.iter().enumerate() {
                    let c = a.cols();
                    if need[i] {
                        let mut d = Vec::with_capacity(a.len());
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + col..r * total + col + c]);
                        }
                        res[i] = Some(d);
                    }
                    col += c;
                }
            }
        }
        Op::Slice { axis, start, len } => {
            let a = inputs[0];
            let mut d = vec![0.0; a.len()];
            if a.rank() == 1 {
                d[*start..start + len].copy_from_slice(g);
            } else if *axis == 0 {
                let cols = a.cols();
                d[start * cols..(start + len) * cols].copy_from_slice(g);
            } else {
                let cols = a.cols();
                for (r, chunk) in g.chunks_exact(*len).enumerate() {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(chunk);
                }
            }
            res[0] = Some(d);
        }
        Op::Bilinear => {
            let (x, m, y) = (inputs[0], inputs[1], inputs[2]);
            let ((b, h), k) = (as_2d(x), y.cols());
            // scale rows of y and x by the upstream gradient
            let gy: Vec<f64> = y
                .data()
                .chunks_exact(k)
                .zip(g)
                .flat_map(|(row, &gv)| row.iter().map(move |v| v * gv))
                .collect();
            if need[0] {
                let mut dx = vec![0.0; b * h];
                gemm_nt(&gy, m.data(), &mut dx, b, k, h);
                res[0] = Some(dx);
            }
            if need[1] {
                let mut dm = vec![0.0; h * k];
                gemm_tn(x.data(), &gy, &mut dm, b, h, k);
                res[1] = Some(dm);
            }
            if need[2] {
                let mut xm = vec![0.0; b * k];
                gemm_nn(x.data(), m.data(), &mut xm, b, h, k);
                for (row, &gv) in xm.chunks_exact_mut(k).zip(g) {
                    row.iter_mut().for_each(|v| *v *= gv);
                }
                res[2] = Some(xm);
            }
        }
        Op::GatherRows(ids) => {
            let t = inputs[0];
            let e = t.cols();
            let mut d = vec![0.0; t.len()];
            for (row, &i) in g.chunks_exact(e).zip(ids) {
                d[i * e..(i + 1) * e]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, v)| *a += v);
            }
            res[0] = Some(d);
        }
        Op::SelectRows(mask) => {
            let n = inputs[0].cols();
            for (slot, take) in [(0usize, true), (1usize, false)] {
                if !need[slot] {
                    continue;
                }
                let mut d = vec![0.0; inputs[slot].len()];
                for (r, &m) in mask.iter().enumerate() {
                    if m == take {
                        d[r * n..(r + 1) * n].copy_from_slice(&g[r * n..(r + 1) * n]);
                    }
                }
                res[slot] = Some(d);
            }
        }
    }
    for (slot, n) in res.iter_mut().zip(need) {
        if !n {
            *slot = None;
        }
    }
    res
}
