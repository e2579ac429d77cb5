//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! Tensors are row-major contiguous buffers with an optional graph node.
//! Running an op on any graph-carrying input records a new node; calling
//! [`Tensor::backward`] on a scalar walks the graph once in reverse
//! topological order and accumulates gradients into every reachable leaf.
//!
//! Everything is 64-bit. There are no views, no striding, and no
//! broadcasting beyond scalars and the handful of row/channel helpers the
//! model code needs. Graphs are single-threaded; tensors without a node
//! are immutable after construction.

mod backward;
mod gradcheck;
mod kernels;
mod ops;
mod serial;

pub use gradcheck::finite_difference_check;
pub use serial::{read_tsr1, write_tsr1, FormatError, TSR1_MAGIC};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

/// Errors produced by tensor construction, forward ops, and backward.
#[derive(Debug, Clone, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {msg}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("backward requires a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward requires a tensor with a graph node")]
    NoGraph,
    #[error("{op}: row {row} has zero norm")]
    ZeroNormRow { op: &'static str, row: usize },
    #[error("{op}: index {index} out of range for {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

/// Operation kinds recorded on graph nodes.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar(f64),
    MulScalar(f64),
    Matmul,
    Transpose,
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Square,
    Recip,
    Clamp { lo: f64, hi: f64 },
    Reshape,
    Concat { axis: usize },
    Sum,
    Mean,
    BatchedDot,
    ScaleRows,
    L2NormalizeRows,
    LogSumExpRows { exclude_diag: bool },
    DiagPart,
    AddRowBias,
    AddChannelBias,
    MulChannel,
    MeanPerChannel,
    LookupRows { indices: Vec<usize> },
}

/// A recorded graph input: the value as seen by the forward pass plus the
/// producing node, when the input itself was on the graph.
pub(crate) struct InputRef {
    pub data: Rc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub node: Option<Rc<Node>>,
}

/// One node of the acyclic computation graph.
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<InputRef>,
    pub out_data: Rc<Vec<f64>>,
    pub out_shape: Vec<usize>,
    /// Persistent gradient cell, present on leaves only. Shared with the
    /// owning `Tensor` so accumulation survives graph teardown.
    pub leaf_grad: Option<Rc<RefCell<Vec<f64>>>>,
}

/// Dense row-major f64 tensor with optional autodiff state.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<Rc<Node>>,
    grad: Option<Rc<RefCell<Vec<f64>>>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                msg: format!("product {} != data length {}", numel_of(shape), data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: None,
            grad: None,
        })
    }

    /// Learnable leaf: tracks gradients across backward calls.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.into_leaf())
    }

    /// Promote a constant tensor to a gradient-tracking leaf.
    pub fn into_leaf(self) -> Self {
        let grad = Rc::new(RefCell::new(vec![0.0; self.data.len()]));
        let node = Rc::new(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            out_data: Rc::clone(&self.data),
            out_shape: self.shape.clone(),
            leaf_grad: Some(Rc::clone(&grad)),
        });
        Tensor {
            shape: self.shape,
            data: self.data,
            node: Some(node),
            grad: Some(grad),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![0.0; numel_of(shape)]),
            node: None,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![value; numel_of(shape)]),
            node: None,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Rc::new(vec![value]),
            node: None,
            grad: None,
        }
    }

    /// Stack equal-shaped tensors along a new leading axis. Constants only;
    /// used for batch assembly.
    pub fn stack(items: &[&Tensor]) -> Result<Self, TensorError> {
        let first = items.first().ok_or_else(|| TensorError::InvalidShape {
            op: "stack",
            shape: vec![],
            msg: "empty input".into(),
        })?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(data, &shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        self.grad.is_some()
    }

    /// Extract the value of a single-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Copy of the accumulated leaf gradient, if this is a leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.grad.as_ref().map(|g| g.borrow().clone())
    }

    pub fn zero_grad(&self) {
        if let Some(g) = &self.grad {
            for v in g.borrow_mut().iter_mut() {
                *v = 0.0;
            }
        }
    }

    /// Strip autodiff state, keeping the storage shared.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
            grad: None,
        }
    }

    /// Mutate the underlying buffer (copy-on-write when a graph or snapshot
    /// still references it). Leaves keep their grad cell; any existing graph
    /// node keeps the old values it saw during forward.
    pub fn update_data(&mut self, f: impl FnOnce(&mut [f64])) {
        let buf: &mut Vec<f64> = Rc::make_mut(&mut self.data);
        f(buf.as_mut_slice());
        if let Some(grad) = &self.grad {
            // Re-point the leaf node at the new buffer so future forward
            // passes read the updated values.
            let node = Rc::new(Node {
                op: Op::Leaf,
                inputs: Vec::new(),
                out_data: Rc::clone(&self.data),
                out_shape: self.shape.clone(),
                leaf_grad: Some(Rc::clone(grad)),
            });
            self.node = Some(node);
        }
    }

    pub(crate) fn input_ref(&self) -> InputRef {
        InputRef {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            node: self.node.clone(),
        }
    }

    /// Build the op result, recording a graph node iff any input carries one.
    pub(crate) fn from_op(op: Op, inputs: &[&Tensor], data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        let tracked = inputs.iter().any(|t| t.node.is_some());
        let data = Rc::new(data);
        let node = if tracked {
            Some(Rc::new(Node {
                op,
                inputs: inputs.iter().map(|t| t.input_ref()).collect(),
                out_data: Rc::clone(&data),
                out_shape: shape.clone(),
                leaf_grad: None,
            }))
        } else {
            None
        };
        Tensor {
            shape,
            data,
            node,
            grad: None,
        }
    }

    pub(crate) fn node(&self) -> Option<&Rc<Node>> {
        self.node.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant() {
        assert!(Tensor::from_vec(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn constants_never_allocate_grad() {
        let t = Tensor::zeros(&[4, 4]);
        assert!(!t.requires_grad());
        assert!(t.grad().is_none());
    }

    #[test]
    fn leaf_has_zeroed_grad() {
        let t = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(t.requires_grad());
        assert_eq!(t.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_rank_zero() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item().unwrap(), 3.5);
    }

    #[test]
    fn update_data_preserves_graph_values() {
        let mut w = Tensor::leaf(vec![2.0], &[1]).unwrap();
        let y = w.mul_scalar(3.0);
        w.update_data(|d| d[0] = 10.0);
        // The recorded graph still sees the old value.
        assert_eq!(y.data(), &[6.0]);
        assert_eq!(w.data(), &[10.0]);
        // A fresh op sees the new value.
        let y2 = w.mul_scalar(3.0);
        assert_eq!(y2.data(), &[30.0]);
    }

    #[test]
    fn stack_batches() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
