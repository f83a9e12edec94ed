use super::{ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for every trainable tensor of a store.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub t: u64,
    pub(crate) slots: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let slots = store
            .ids()
            .map(|id| {
                store.is_trainable(id).then(|| {
                    let n = store.get(id).numel();
                    (vec![T::zero(); n], vec![T::zero(); n])
                })
            })
            .collect();
        Self {
            config,
            t: 0,
            slots,
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        self.slots
            .get(id.0)
            .and_then(|s| s.as_ref())
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn moments_mut(&mut self, id: ParamId) -> Option<(&mut Vec<T>, &mut Vec<T>)> {
        self.slots
            .get_mut(id.0)
            .and_then(|s| s.as_mut())
            .map(|(m, v)| (m, v))
    }
}

/// One bias-corrected Adam update of every trainable tensor that holds a
/// gradient. Gradients are checked before anything is modified.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.slots.len() != store.len() {
        return Err(Error::Contract(format!(
            "adam state tracks {} tensors, store has {}",
            state.slots.len(),
            store.len()
        )));
    }
    for id in store.ids() {
        if let Some(g) = store.get(id).grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient in parameter {}",
                    store.name(id)
                )));
            }
        }
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    for id in store.ids().collect::<Vec<_>>() {
        let Some((m, v)) = state.slots[id.0].as_mut() else {
            continue;
        };
        let tensor = store.get_mut(id);
        let Some(g) = tensor.grad().map(<[T]>::to_vec) else {
            continue;
        };
        for (((p, gi), mi), vi) in tensor.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * *gi;
            *vi = b2 * *vi + (T::one() - b2) * *gi * *gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn single(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(value));
        store.get_mut(id).grad_mut()[0] = grad;
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = single(0.75, 0.0);
        let mut st = AdamState::new(AdamConfig::default(), &store);
        adam_step(&mut store, &mut st).unwrap();
        assert_eq!(store.get(id).data()[0], 0.75);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let (mut store, id) = single(1.0, 0.5);
        let mut st = AdamState::new(AdamConfig::default(), &store);
        adam_step(&mut store, &mut st).unwrap();
        let expected = -1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((store.get(id).data()[0] - 1.0 - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_are_each_about_lr() {
        let (mut store, id) = single(0.0, 0.3);
        let mut st = AdamState::new(AdamConfig::default(), &store);
        let mut prev = 0.0;
        for _ in 0..2 {
            adam_step(&mut store, &mut st).unwrap();
            let now = store.get(id).data()[0];
            assert!((now - prev + 1e-4).abs() < 1e-6);
            prev = now;
        }
        assert_eq!(st.t, 2);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut store, _) = single(0.0, f64::NAN);
        let mut st = AdamState::new(AdamConfig::default(), &store);
        match adam_step(&mut store, &mut st) {
            Err(Error::Divergence(msg)) => assert!(msg.contains("theta")),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert_eq!(st.t, 0);
    }
}
