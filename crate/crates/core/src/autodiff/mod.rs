//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The graph is rebuilt for every batch (define-by-run), so sequence lengths
//! may vary between batches. [`finite_diff`] is an independent central
//! difference oracle that only uses forward re-evaluation.

mod array;
mod graph;

pub use array::Array;
pub(crate) use graph::{sigmoid, softplus};
pub use graph::{softplus_inverse, Gradients, Graph, NodeId, Op};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("index {index} out of range for {bound} rows")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

/// Central-difference gradient of `root` with respect to the named
/// parameter, one coordinate at a time. The graph is restored afterwards.
pub fn finite_diff(
    graph: &mut Graph,
    param: &str,
    root: NodeId,
    eps: f64,
) -> Result<Array, AutodiffError> {
    if !(eps > 0.0) {
        return Err(AutodiffError::InvalidStep(eps));
    }
    let id = graph
        .param_id(param)
        .ok_or_else(|| AutodiffError::UnknownParam(param.to_string()))?;
    let original = graph.value(id).clone();
    let mut grad = Vec::with_capacity(original.len());
    for i in 0..original.len() {
        let x = original.data()[i];
        graph.set_param(param, original.with_value(i, x + eps)?)?;
        let plus = root_value(graph, root)?;
        graph.set_param(param, original.with_value(i, x - eps)?)?;
        let minus = root_value(graph, root)?;
        grad.push((plus - minus) / (2.0 * eps));
    }
    graph.set_param(param, original.clone())?;
    Array::new(original.shape().to_vec(), grad)
}

fn root_value(graph: &Graph, root: NodeId) -> Result<f64, AutodiffError> {
    let v = graph.value(root);
    v.item()
        .ok_or_else(|| AutodiffError::NonScalarRoot(v.shape().to_vec()))
}

/// Central differences of an arbitrary scalar function of one array.
pub fn finite_diff_fn(
    x: &Array,
    eps: f64,
    mut f: impl FnMut(&Array) -> f64,
) -> Result<Array, AutodiffError> {
    if !(eps > 0.0) {
        return Err(AutodiffError::InvalidStep(eps));
    }
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x.data()[i];
        let plus = f(&x.with_value(i, v + eps)?);
        let minus = f(&x.with_value(i, v - eps)?);
        grad.push((plus - minus) / (2.0 * eps));
    }
    Array::new(x.shape().to_vec(), grad)
}

/// Relative error used by gradient checks: `|a - b| / max(1, |a|, |b|)`
/// elementwise, maximised over coordinates.
pub fn max_relative_error(a: &Array, b: &Array) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}
