//! Reverse-mode gradient tape.
//!
//! Define-by-run: ops append nodes while the forward pass executes, so the
//! graph can depend on sampled exit depths and gate values. A tape belongs to
//! one training step on one thread and is consumed by exactly one `backward`.

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&[T], &mut Gradients<T>) + Send>;

struct Node<T: Scalar> {
    backward: Option<BackwardFn<T>>,
}

struct TapeState<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Ordered record of primitive operations with the saved inputs their
/// backward passes need.
pub struct GradientTape<T: Scalar> {
    inner: Arc<Mutex<TapeState<T>>>,
}

impl<T: Scalar> Clone for GradientTape<T> {
    fn clone(&self) -> Self {
        GradientTape {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for GradientTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradientTape<T> {
    pub fn new() -> Self {
        GradientTape {
            inner: Arc::new(Mutex::new(TapeState {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub(crate) fn same_tape(&self, other: &GradientTape<T>) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn record(&self, backward: Option<BackwardFn<T>>) -> usize {
        let mut state = self.inner.lock().unwrap();
        state.nodes.push(Node { backward });
        state.nodes.len() - 1
    }

    /// Register `t` as a differentiable leaf. The returned tensor shares
    /// storage with `t` and its gradient can be read back after `backward`.
    pub fn watch(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.record(None);
        t.with_node(self, id)
    }

    /// Run the backward pass from a scalar loss. Consumes the tape's op
    /// record; a second call on the same tape is an error.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let loss_id = match loss.node_on(self) {
            Some(id) => id,
            None => {
                return Err(Error::contract(
                    "loss tensor is not attached to this tape".to_string(),
                ))
            }
        };
        let mut nodes = {
            let mut state = self.inner.lock().unwrap();
            if state.consumed {
                return Err(Error::contract("gradient tape already consumed"));
            }
            state.consumed = true;
            std::mem::take(&mut state.nodes)
        };

        let mut grads = Gradients {
            slots: (0..nodes.len()).map(|_| None).collect(),
        };
        grads.slots[loss_id] = Some(vec![T::one()]);

        for id in (0..=loss_id).rev() {
            if grads.slots[id].is_none() {
                continue;
            }
            if let Some(back) = nodes[id].backward.take() {
                let g = grads.slots[id].take().expect("grad present");
                back(&g, &mut grads);
                grads.slots[id] = Some(g);
            }
        }
        Ok(grads)
    }

    pub fn node_count(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }
}

/// Gradient buffers keyed by tape node id.
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a watched tensor, if any path reached it.
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        let node = t.node_id()?;
        self.slots.get(node)?.as_deref()
    }

    /// Gradient by raw node id.
    pub fn get_id(&self, id: usize) -> Option<&[T]> {
        self.slots.get(id)?.as_deref()
    }

    /// Mutable accumulation buffer for node `id`, zero-initialized on first use.
    pub(crate) fn accum(&mut self, id: usize, len: usize) -> &mut [T] {
        let slot = &mut self.slots[id];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); len]);
        }
        slot.as_deref_mut().expect("slot just filled")
    }
}
