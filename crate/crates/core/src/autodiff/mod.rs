//! Reverse-mode automatic differentiation over dense float-64 arrays.
//!
//! A [`Tape`] owns every node created during a forward pass. Nodes are
//! appended in evaluation order, so the tape index order is already a
//! topological order and [`Tape::backward`] walks it in reverse, visiting
//! each node once. [`Value`] is a cheap handle into the tape.
//!
//! Every operation checks its output for NaN/Inf and fails at the producing
//! operation rather than letting non-finite numbers propagate.

mod gemm;
pub mod gradcheck;
mod ops;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheck};
pub use ops::Unary;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("{op}: index {index} out of range for extent {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardTwice,
}

pub type AdResult<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) op: ops::Op,
    pub(crate) requires_grad: bool,
}

impl Node {
    fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> AdResult<Value> {
        self.push_leaf(tensor, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> AdResult<Value> {
        self.push_leaf(tensor, false)
    }

    fn push_leaf(&mut self, tensor: Tensor, requires_grad: bool) -> AdResult<Value> {
        if tensor.shape.iter().any(|&e| e == 0) && !tensor.data.is_empty() {
            return Err(AutodiffError::InvalidArgument { op: "leaf", message: format!("bad shape {:?}", tensor.shape) });
        }
        if tensor.data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push(tensor.shape, tensor.data, ops::Op::Leaf, requires_grad))
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: ops::Op, requires_grad: bool) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, grad: None, op, requires_grad });
        Value(self.nodes.len() - 1)
    }

    pub(crate) fn node(&self, v: Value) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Value) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.data.clone() }
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Value) -> f64 {
        let d = &self.nodes[v.0].data;
        assert_eq!(d.len(), 1, "item() on a node with {} elements", d.len());
        d[0]
    }

    /// Gradient of a trainable leaf after [`Tape::backward`]. Leaves that the
    /// loss does not depend on report `None`.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zero-filled when the loss does not reach `v`.
    pub fn grad_tensor(&self, v: Value) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.grad.clone().unwrap_or_else(|| vec![0.0; n.data.len()]) }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Populate gradients of every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Value) -> AdResult<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let root = &self.nodes[loss.0];
        if root.data.len() != 1 {
            return Err(AutodiffError::NotScalar(root.shape.clone()));
        }
        self.backward_done = true;
        if !root.requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            if matches!(node.op, ops::Op::Leaf) {
                node.grad = Some(g);
                continue;
            }
            ops::backward_node(node, &g, before);
            // Interior gradients are consumed; only leaves keep theirs.
        }
        Ok(())
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> AdResult<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}
