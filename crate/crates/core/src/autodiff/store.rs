use serde::{Deserialize, Serialize};

use super::{AutodiffError, Gradients, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors addressed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Adds every parameter gradient in `grads` into the stored tensors.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), AutodiffError> {
        for (id, g) in grads.params() {
            if let Some(t) = self.tensors.get_mut(id.0) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Allocates (or zeroes) a gradient buffer for every trainable tensor.
    pub fn zero_grads(&mut self) {
        for t in self.tensors.iter_mut().filter(|t| t.requires_grad()) {
            if t.grad().is_none() {
                let zeros = vec![0.0; t.numel()];
                t.accumulate_grad(&zeros).expect("same length");
            } else {
                t.zero_grad();
            }
        }
    }

    /// Drops every gradient buffer.
    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().filter(|t| t.requires_grad()).collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.tensors[id.0].set_requires_grad(flag);
    }
}
