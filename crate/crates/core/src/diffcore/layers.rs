//! Parameterised building blocks on top of the tape ops.

use rand::Rng;

use super::ops::BnStats;
use super::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{ensure, Result};

/// Recording context for a forward pass: the tape, the parameter values and
/// whether normalisation layers use batch statistics.
pub struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
    pub train: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a ParamStore<T>, train: bool) -> Self {
        Self { g, params, train }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.params, id)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `[out, in]` and bias drawn from `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), vec![out_dim, in_dim], bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), vec![out_dim], bound, rng);
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    /// Same initialisation without a bias, for layers feeding a normalisation
    /// that would cancel it.
    pub fn without_bias<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), vec![out_dim, in_dim], bound, rng);
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        cx.g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        size: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * size * size) as f64).sqrt();
        let kernel = store.add_uniform(
            format!("{name}.weight"),
            vec![out_ch, in_ch, size, size],
            bound,
            rng,
        );
        Self {
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let k = cx.p(self.kernel);
        cx.g.conv2d(x, k, self.stride, self.pad)
    }
}

/// Batch normalisation with running statistics, optionally without affine.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(store.add(format!("{name}.weight"), Tensor::full(vec![channels], T::one()))),
                Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![channels]))),
            )
        } else {
            (None, None)
        };
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels]));
        let running_var =
            store.add_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], T::one()));
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = self.gamma.map(|p| cx.p(p));
        let beta = self.beta.map(|p| cx.p(p));
        let params = cx.params;
        let stats = if cx.train {
            BnStats::Batch(Some((self.running_mean, self.running_var)))
        } else {
            BnStats::Fixed {
                mean: params.get(self.running_mean).data(),
                var: params.get(self.running_var).data(),
            }
        };
        cx.g.batch_norm(x, gamma, beta, stats)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(vec![dim], T::one())),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        cx.g.layer_norm(x, g, b)
    }
}

/// Multi-head cross-attention: queries attend over a token set through
/// learned query/key/value projections and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        ensure!(
            heads >= 1 && dim % heads == 0,
            Config,
            "attention width {dim} is not divisible by {heads} heads"
        );
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q_proj"), dim, dim, rng),
            // A key bias shifts every score of a query equally and cannot
            // change the softmax.
            key: Linear::without_bias(store, &format!("{name}.k_proj"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v_proj"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out_proj"), dim, dim, rng),
            heads,
        })
    }

    /// `queries: [B * S, k]`, `tokens: [B * T, k]` grouped by `batch`.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        queries: Var,
        tokens: Var,
        batch: usize,
    ) -> Result<Var> {
        ensure!(
            cx.g.shape(tokens)[0] >= batch && batch >= 1,
            Contract,
            "attention over an empty token set"
        );
        let q = self.query.forward(cx, queries)?;
        let k = self.key.forward(cx, tokens)?;
        let v = self.value.forward(cx, tokens)?;
        let a = cx.g.attention(q, k, v, batch, self.heads)?;
        self.out.forward(cx, a)
    }
}
