//! Reverse-mode automatic differentiation over dense 64-bit arrays.
//!
//! A [`Graph`] is a dynamic tape: every operation appends a node holding its
//! value, its parents, and enough attributes to replay the chain rule.
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients for every node, including named parameter leaves registered
//! through [`Graph::leaf`].
//!
//! Design rules, enforced everywhere:
//! - all math is `f64`; there is no lower-precision path,
//! - every forward result is scanned for NaN/Inf and produces a hard error
//!   naming the offending operation and node,
//! - graph construction and backward are single-threaded per graph; distinct
//!   graphs are independent and may live on different threads.

mod conv;
mod gemm;
mod gradcheck;
mod ops;
mod suite;

pub use conv::ConvSpec;
pub(crate) use gemm::dot;
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{EPS_KL, EPS_NORM};
pub use suite::{op_gradcheck_suite, SuiteEntry, GRADCHECK_STEP, GRADCHECK_TOL};

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Dense row-major n-dimensional array of `f64`.
///
/// This is the plain value type shared by the whole crate: graph node values,
/// model parameters, spectrogram grids, and checkpoints all store `Array`s.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "array",
                detail: format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar array");
        self.data[0]
    }
}

/// Handle to a node in a [`Graph`]. Cheap to copy; only meaningful for the
/// graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by op `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("invalid distribution in {op}: {detail}")]
    Distribution { op: &'static str, detail: String },
}

/// Operation record stored on each node. Attributes are whatever backward
/// needs to replay the chain rule; parent values are read from the tape.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Log(TensorId),
    LeakyRelu(TensorId, f64),
    Sigmoid(TensorId),
    Clamp(TensorId, f64, f64),
    MatMul(TensorId, TensorId),
    MatVec(TensorId, TensorId),
    Conv2d(TensorId, TensorId, ConvSpec),
    ConvTranspose2d(TensorId, TensorId, ConvSpec),
    ConcatChannels(TensorId, TensorId),
    BroadcastBatch(TensorId, usize),
    TileSpatial(TensorId, usize, usize),
    SumBatch(TensorId),
    MeanSpatial(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    L1Mean(TensorId, TensorId),
    UnitNormalize(TensorId),
    Softmax(TensorId, f64),
    SumNorm(TensorId),
    Cosine(TensorId, TensorId),
    KlDiv(TensorId, TensorId),
    CrossEntropyLogits(TensorId, usize),
    Reshape(TensorId),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Log(..) => "log",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Clamp(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::MatVec(..) => "matvec",
            Op::Conv2d(..) => "conv2d",
            Op::ConvTranspose2d(..) => "conv_transpose2d",
            Op::ConcatChannels(..) => "concat_channels",
            Op::BroadcastBatch(..) => "broadcast_batch",
            Op::TileSpatial(..) => "tile_spatial",
            Op::SumBatch(..) => "sum_batch",
            Op::MeanSpatial(..) => "mean_spatial",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::L1Mean(..) => "l1_mean",
            Op::UnitNormalize(..) => "unit_normalize",
            Op::Softmax(..) => "softmax",
            Op::SumNorm(..) => "sum_norm",
            Op::Cosine(..) => "cosine",
            Op::KlDiv(..) => "kl_div",
            Op::CrossEntropyLogits(..) => "cross_entropy_logits",
            Op::Reshape(..) => "reshape",
        }
    }

    pub(crate) fn parents(&self) -> Vec<TensorId> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatVec(a, b)
            | Op::Conv2d(a, b, _)
            | Op::ConvTranspose2d(a, b, _)
            | Op::ConcatChannels(a, b)
            | Op::L1Mean(a, b)
            | Op::Cosine(a, b)
            | Op::KlDiv(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Log(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Clamp(a, _, _)
            | Op::BroadcastBatch(a, _)
            | Op::TileSpatial(a, _, _)
            | Op::SumBatch(a)
            | Op::MeanSpatial(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::UnitNormalize(a)
            | Op::Softmax(a, _)
            | Op::SumNorm(a)
            | Op::CrossEntropyLogits(a, _)
            | Op::Reshape(a) => vec![a],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Array,
    pub(crate) grad: Vec<f64>,
    pub(crate) op: Op,
}

/// Dynamic reverse-mode tape. Nodes are appended in construction order, which
/// is by definition a valid topological order for backward.
pub struct Graph {
    pub(crate) inner: RefCell<GraphInner>,
}

pub(crate) struct GraphInner {
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: BTreeMap<String, TensorId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(f, "Graph({} nodes, {} params)", inner.nodes.len(), inner.params.len())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(GraphInner { nodes: Vec::new(), params: BTreeMap::new() }),
        }
    }

    /// Register a named trainable leaf. Names must be unique per graph; they
    /// key gradient lookup and checkpoint serialization.
    pub fn leaf(&self, name: &str, value: Array) -> Result<TensorId, TensorError> {
        {
            let inner = self.inner.borrow();
            if inner.params.contains_key(name) {
                return Err(TensorError::DuplicateParam(name.to_string()));
            }
        }
        let id = self.push(value, Op::Leaf)?;
        self.inner.borrow_mut().params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Insert a non-trainable value. It still receives a gradient buffer so
    /// gradient-blocking contracts can be asserted, but it is never updated.
    pub fn constant(&self, value: Array) -> Result<TensorId, TensorError> {
        self.push(value, Op::Constant)
    }

    pub(crate) fn push(&self, value: Array, op: Op) -> Result<TensorId, TensorError> {
        let mut inner = self.inner.borrow_mut();
        let id = TensorId(inner.nodes.len());
        if let Some(bad) = value.data.iter().position(|v| !v.is_finite()) {
            let _ = bad;
            return Err(TensorError::NonFinite { op: op.name(), node: id.0 });
        }
        let n = value.data.len();
        inner.nodes.push(Node { value, grad: vec![0.0; n], op });
        Ok(id)
    }

    pub fn shape(&self, id: TensorId) -> Vec<usize> {
        self.inner.borrow().nodes[id.0].value.shape.clone()
    }

    pub fn value(&self, id: TensorId) -> Array {
        self.inner.borrow().nodes[id.0].value.clone()
    }

    pub fn grad(&self, id: TensorId) -> Array {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id.0];
        Array { shape: node.value.shape.clone(), data: node.grad.clone() }
    }

    pub fn param_id(&self, name: &str) -> Option<TensorId> {
        self.inner.borrow().params.get(name).copied()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.inner.borrow().params.keys().cloned().collect()
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively, so
    /// nodes feeding several consumers receive the full sum; leaves that do
    /// not reach the loss keep an all-zero gradient.
    pub fn backward(&self, loss: TensorId) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        if inner.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(inner.nodes[loss.0].value.shape.clone()));
        }
        for node in inner.nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        inner.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            let op = inner.nodes[i].op.clone();
            let parents = op.parents();
            if parents.is_empty() {
                continue;
            }
            if inner.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let deltas = ops::backward_deltas(&inner.nodes, i, &op)?;
            debug_assert_eq!(deltas.len(), parents.len());
            for (parent, delta) in parents.into_iter().zip(deltas) {
                let g = &mut inner.nodes[parent.0].grad;
                debug_assert_eq!(g.len(), delta.len());
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            // Check gradient finiteness as we go so the failure names the op
            // whose backward produced it.
            for parent in op.parents() {
                if inner.nodes[parent.0].grad.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: op.name(), node: i });
                }
            }
        }
        Ok(())
    }
}
