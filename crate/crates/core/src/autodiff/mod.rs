//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Everything trainable in the crate is expressed as primitives on a
//! [`Graph`]. The CTC and transducer losses enter as custom nodes carrying
//! their analytic gradients.

mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

use std::collections::BTreeMap;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use graph::{log_softmax_slice, softmax_slice, CustomBackward, Gradients, Graph, Var};
pub use tensor::{argmax, log_add, log_softmax, logsumexp, matmul, softmax, Tensor};

/// Named parameter arrays, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}
