//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable node in a computation graph. Every operation
//! in [`ops`] builds a new node that remembers its inputs, and
//! [`Tensor::backward`] walks the graph in reverse topological order,
//! accumulating gradients into every node that requires them.
//!
//! Only the grad slot of a node is mutable. Parameters are updated by
//! replacing the leaf tensor, which keeps old graphs and snapshots valid.

mod backward;
mod gradcheck;
mod kernels;
pub mod ops;

use std::fmt;
use std::sync::{Arc, Mutex};

pub use gradcheck::{check_gradients, finite_diff_grad, relative_error, GradCheckReport};
pub use ops::*;

/// Errors raised by tensor construction and tensor operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: dimension of size zero")]
    EmptyDimension { op: &'static str },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on a tensor that does not require gradients")]
    NoGradient,
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: backward::Op,
}

/// Shared handle to a graph node. Cloning is cheap and preserves identity.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, op: backward::Op) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op,
        }))
    }

    fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor(Arc::new(Node {
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: Mutex::new(None),
            op: backward::Op::Leaf,
        })))
    }

    /// A constant: gradients never flow into it.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// A trainable leaf.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], &[], false).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(vec![0.0; n], shape, false).expect("zeros shape")
    }

    /// Builds a 2-D constant from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::BadRank {
                op: "from_rows",
                expected: "rows of equal length",
                got: rows.iter().map(Vec::len).collect(),
            });
        }
        Self::new(rows.concat(), &[rows.len(), cols])
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, backward::Op::Leaf)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient, if any has been propagated here.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Same data and shape as a fresh leaf, detached from any graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.data().to_vec(), self.shape(), false).expect("same shape")
    }

    /// Stable identity of the underlying node.
    pub fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn node(&self) -> &Node {
        &self.0
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.numel(), 4);
        assert!(!t.requires_grad());
        assert!(Tensor::parameter(vec![0.0; 6], &[2, 3]).unwrap().requires_grad());
    }

    #[test]
    fn clones_share_identity() {
        let t = Tensor::scalar(1.0);
        let u = t.clone();
        assert!(t.same_node(&u));
        assert!(!t.same_node(&t.detach()));
    }
}
