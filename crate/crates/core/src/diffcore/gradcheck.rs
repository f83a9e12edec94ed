use super::layers::Ctx;
use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPSILON: f64 = 1e-5;

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check: function returned shape {:?}, not a scalar",
            v.shape()
        )));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(Error::Divergence(format!(
            "finite_diff_check: function value {y} is not finite"
        )));
    }
    Ok(y)
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `epsilon`.
///
/// `f` receives one leaf per entry of `inputs` and must return a scalar.
/// The result is the maximum over all input coordinates of
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, var);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let up = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig - epsilon;
            let down = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[j];
            if !a.is_finite() {
                return Err(Error::Divergence(format!(
                    "finite_diff_check: analytic gradient {a} of input {i}[{j}]"
                )));
            }
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// [`finite_diff_check`] over every trainable tensor of `store` followed by
/// `inputs`. `f` receives a training-mode context whose parameters resolve
/// to the probed leaves, plus one variable per extra input.
pub fn param_gradient_check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    epsilon: f64,
) -> Result<f64>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut all: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
    all.extend_from_slice(inputs);
    finite_diff_check(
        |g, vars| {
            for (&id, &v) in ids.iter().zip(vars) {
                g.bind_param(id, v);
            }
            let mut cx = Ctx::new(g, store, true);
            f(&mut cx, &vars[ids.len()..])
        },
        &all,
        epsilon,
    )
}
