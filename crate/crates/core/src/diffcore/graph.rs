use std::collections::HashMap;

use super::ops::{self, Op};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{ensure, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Batch statistics observed by a train-mode batchnorm, to be folded into
/// the running buffers with [`ParamStore::apply_running_updates`].
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

/// Reverse-mode tape. Values are computed when an op is recorded.
pub struct Graph<T = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    param_index: HashMap<ParamId, Var>,
    running: Vec<RunningUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            running: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or input tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding the current value of a stored parameter. Repeated calls
    /// with the same id return the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_index.get(&id) {
            return v;
        }
        let mut value = store.get(id).clone();
        value.clear_grad();
        let v = self.leaf(value);
        self.bind_param(id, v);
        v
    }

    /// Makes `var` stand in for parameter `id` in subsequent [`Graph::param`]
    /// calls. Used to differentiate with respect to externally built leaves.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.param_index.insert(id, var);
        self.params.push((id, var));
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().copied()
    }

    pub(crate) fn record_running(&mut self, update: RunningUpdate<T>) {
        self.running.push(update);
    }

    pub fn running_updates(&self) -> &[RunningUpdate<T>] {
        &self.running
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).numel() == 1,
            Contract,
            "backward needs a scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            ops::backward(self, i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when `v` does not influence the loss.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); graph.value(v).numel()])
    }
}

/// Adds `src` into the gradient slot of `v`.
pub(crate) fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, src: Vec<T>) {
    match &mut grads[v.0] {
        Some(dst) => {
            for (d, s) in dst.iter_mut().zip(&src) {
                *d = *d + *s;
            }
        }
        slot @ None => *slot = Some(src),
    }
}
