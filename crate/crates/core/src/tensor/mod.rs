//! Dense row-major tensors with optional participation in a gradient tape.

mod kernels;
mod ops;
mod tape;

pub use ops::{
    causal_attention, concat_cols, embedding_lookup, gated_rows, rotary, st_gate, RopeTable,
};
pub use tape::{GradientTape, Gradients};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array. Cloning is cheap (shared storage). A tensor
/// optionally carries a handle into the active gradient tape; tensors without
/// a handle are plain immutable values and can be shared across threads.
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<NodeRef<T>>,
}

pub(crate) struct NodeRef<T: Scalar> {
    pub(crate) tape: GradientTape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for NodeRef<T> {
    fn clone(&self) -> Self {
        NodeRef {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); numel]),
            node: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new((0..numel).map(&mut f).collect()),
            node: None,
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::cast(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Number of rows when viewed as a 2-D matrix (trailing axis = columns).
    pub fn rows(&self) -> usize {
        debug_assert!(!self.shape.is_empty());
        self.shape[..self.shape.len() - 1].iter().product::<usize>().max(1)
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {:?} out of bounds at axis {}", index, i);
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// True when both tensors refer to the same underlying buffer.
    pub fn shares_storage(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// Same storage, detached from any tape.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub(crate) fn with_node(&self, tape: &GradientTape<T>, id: usize) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        }
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Vec<T>,
        node: Option<NodeRef<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub(crate) fn node_on(&self, tape: &GradientTape<T>) -> Option<usize> {
        self.node
            .as_ref()
            .filter(|n| n.tape.same_tape(tape))
            .map(|n| n.id)
    }

    pub(crate) fn tape(&self) -> Option<&GradientTape<T>> {
        self.node.as_ref().map(|n| &n.tape)
    }
}

/// The tape shared by the given operands, if any operand is tracked.
/// Mixing tensors from two live tapes is a programming error.
pub(crate) fn joint_tape<'a, T: Scalar>(
    operands: &[&'a Tensor<T>],
) -> Option<&'a GradientTape<T>> {
    let mut found: Option<&GradientTape<T>> = None;
    for t in operands {
        if let Some(tape) = t.tape() {
            match found {
                None => found = Some(tape),
                Some(prev) => assert!(
                    prev.same_tape(tape),
                    "operands belong to different gradient tapes"
                ),
            }
        }
    }
    found
}
