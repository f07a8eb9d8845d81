//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one episode. Operations append
//! nodes to the tape and return lightweight [`Value`] handles; [`Tape::backward`]
//! replays the tape in reverse and accumulates gradients into the leaves.
//!
//! The tape is single-threaded by construction (`RefCell` interior state);
//! concurrent episodes use separate tapes over shared, read-only parameters.

mod kernels;
mod ops;

pub use kernels::{mm_nn, mm_nt, mm_tn};

use std::cell::{Cell, RefCell};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for {bound}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {got:?}")]
    NonScalarLoss { got: Vec<usize> },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

/// Handle to a tensor node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    pub(crate) id: usize,
}

/// Provenance of a node: its parents and which backward rule applies.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul(Value, Value),
    Add(Value, Value),
    Sub(Value, Value),
    Hadamard(Value, Value),
    AddRowBias(Value, Value),
    Scale(Value, f64),
    ScaleByScalar(Value, Value),
    Relu(Value),
    Rsqrt(Value),
    RowSoftmax(Value),
    SumAll(Value),
    MeanAll(Value),
    SumAxis(Value, usize),
    MeanAxis(Value, usize),
    ConcatRows(Vec<Value>),
    Transpose(Value),
    GatherRows(Value, Vec<usize>),
    BroadcastRow(Value, usize),
    ScaleRows(Value, Value),
    ScaleCols(Value, Value),
    Reshape(Value),
    /// Mask entries are 0 or 1/(1-p); inverted scaling baked in.
    Dropout(Value, Vec<f64>),
    CrossEntropy(Value, Vec<usize>),
    CosineRows(Value, Value),
}

pub(crate) struct Node {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    /// Persistent gradient slot; populated on leaves only, accumulated
    /// across backward calls until [`Tape::zero_grad`].
    pub grad: Option<Vec<f64>>,
    pub op: Op,
}

impl Node {
    fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }
}

/// Ordered record of operations; parents always precede children.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    clamp_warnings: Cell<u64>,
    /// Test hook: scales matmul's gradient w.r.t. its left operand.
    /// 1.0 in normal operation; used as a negative control for gradcheck.
    pub(crate) corrupt_matmul_backward: Cell<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            clamp_warnings: Cell::new(0),
            corrupt_matmul_backward: Cell::new(1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Times a cross-entropy probability was clamped at the 1e-12 floor.
    pub fn clamp_warnings(&self) -> u64 {
        self.clamp_warnings.get()
    }

    pub(crate) fn bump_clamp_warnings(&self, n: u64) {
        self.clamp_warnings.set(self.clamp_warnings.get() + n);
    }

    pub(crate) fn push(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Value {
        debug_assert_eq!(data.len(), numel(&shape));
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        Value { id }
    }

    /// Trainable leaf.
    pub fn param(&self, data: Vec<f64>, shape: Vec<usize>) -> Value {
        assert_eq!(data.len(), numel(&shape), "param data/shape mismatch");
        self.push(data, shape, true, Op::Leaf)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Value {
        assert_eq!(data.len(), numel(&shape), "constant data/shape mismatch");
        self.push(data, shape, false, Op::Leaf)
    }

    pub fn scalar_constant(&self, x: f64) -> Value {
        self.constant(vec![x], vec![])
    }

    pub fn shape(&self, v: Value) -> Vec<usize> {
        self.nodes.borrow()[v.id].shape.clone()
    }

    pub fn data(&self, v: Value) -> Vec<f64> {
        self.nodes.borrow()[v.id].data.clone()
    }

    /// Scalar payload of a 0-d (or single-element) value.
    pub fn scalar(&self, v: Value) -> f64 {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        assert_eq!(node.data.len(), 1, "scalar() on non-scalar value");
        node.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Value) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    pub(crate) fn any_requires_grad(&self, vs: &[Value]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.id].requires_grad)
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls; interior gradients are transient.
    pub fn backward(&self, loss: Value) -> Result<(), TensorError> {
        {
            let nodes = self.nodes.borrow();
            let node = &nodes[loss.id];
            if numel(&node.shape) != 1 {
                return Err(TensorError::NonScalarLoss {
                    got: node.shape.clone(),
                });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let Some(gout) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if nodes[id].is_leaf() {
                let len = nodes[id].data.len();
                let slot = nodes[id].grad.get_or_insert_with(|| vec![0.0; len]);
                for (s, g) in slot.iter_mut().zip(&gout) {
                    *s += g;
                }
                continue;
            }
            ops::backward_step(self, &nodes, &mut grads, id, &gout);
        }
        Ok(())
    }
}

pub(crate) fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    parent: Value,
    add: impl FnOnce(&mut [f64]),
) {
    if !nodes[parent.id].requires_grad {
        return;
    }
    let len = nodes[parent.id].data.len();
    let slot = grads[parent.id].get_or_insert_with(|| vec![0.0; len]);
    add(slot);
}

#[cfg(test)]
mod tests;
