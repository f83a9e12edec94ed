use rand::Rng;

use super::{Gradients, Graph, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

/// Named collection of trainable parameters and non-trainable buffers
/// (batchnorm running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    /// Uniform `U(-bound, bound)` initialisation.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    /// Adds the parameter gradients of a backward pass into each tensor's
    /// gradient buffer.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (id, var) in graph.bound_params() {
            if let Some(g) = grads.get(var) {
                let dst = self.entries[id.0].tensor.grad_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d = *d + *s;
                }
            }
        }
    }

    /// Writes the running-statistics updates recorded by train-mode batchnorm.
    pub fn apply_running_updates(&mut self, graph: &Graph<T>) {
        let m = T::of(super::BN_MOMENTUM);
        let keep = T::one() - m;
        for up in graph.running_updates() {
            for (id, batch) in [(up.mean, &up.batch_mean), (up.var, &up.batch_var)] {
                let dst = self.entries[id.0].tensor.data_mut();
                for (d, b) in dst.iter_mut().zip(batch) {
                    *d = keep * *d + m * *b;
                }
            }
        }
    }

    /// Copies values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: {} {:?} vs {} {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}
