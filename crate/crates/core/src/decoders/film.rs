use rand::Rng;

use super::DecoderConfig;
use crate::diffcore::layers::{BatchNorm, Ctx, Linear};
use crate::diffcore::{ParamStore, Scalar, Tensor, Var};
use crate::error::Result;

/// Batch normalisation without affine parameters followed by a per-point
/// scale `gamma(code)` and shift `beta(code)`.
#[derive(Clone, Debug)]
pub struct ConditionalBatchNorm {
    pub bn: BatchNorm,
    pub gamma: Linear,
    pub beta: Linear,
}

impl ConditionalBatchNorm {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        code_dim: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bn = BatchNorm::new(store, &format!("{name}.bn"), channels, false);
        let gamma = Linear::new(store, &format!("{name}.gamma"), code_dim, channels, rng);
        let beta = Linear::new(store, &format!("{name}.beta"), code_dim, channels, rng);
        // Start as the identity modulation.
        *store.get_mut(gamma.weight) = Tensor::zeros(vec![channels, code_dim]);
        *store.get_mut(gamma.bias.unwrap()) = Tensor::full(vec![channels], T::one());
        *store.get_mut(beta.weight) = Tensor::zeros(vec![channels, code_dim]);
        *store.get_mut(beta.bias.unwrap()) = Tensor::zeros(vec![channels]);
        Self { bn, gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, code: Var) -> Result<Var> {
        let n = self.bn.forward(cx, x)?;
        let g = self.gamma.forward(cx, code)?;
        let b = self.beta.forward(cx, code)?;
        let y = cx.g.mul(n, g)?;
        cx.g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct FilmBlock {
    pub fc0: Linear,
    pub cbn0: ConditionalBatchNorm,
    pub fc1: Linear,
    pub cbn1: ConditionalBatchNorm,
}

/// The concat backbone with every conditioning site replaced by conditional
/// batch normalisation.
#[derive(Clone, Debug)]
pub struct FilmDecoder {
    fc_in: Linear,
    blocks: Vec<FilmBlock>,
    head: Linear,
}

impl FilmDecoder {
    pub(super) fn new<T: Scalar>(
        config: &DecoderConfig,
        code_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Self {
        let k = config.hidden;
        let fc_in = Linear::new(store, "decoder.fc_in", config.embed_dim(), k, rng);
        let blocks = (0..config.num_blocks())
            .map(|i| {
                let name = format!("decoder.block{i}");
                FilmBlock {
                    fc0: Linear::without_bias(store, &format!("{name}.fc0"), k, k, rng),
                    cbn0: ConditionalBatchNorm::new(store, &format!("{name}.cbn0"), code_dim, k, rng),
                    fc1: Linear::without_bias(store, &format!("{name}.fc1"), k, k, rng),
                    cbn1: ConditionalBatchNorm::new(store, &format!("{name}.cbn1"), code_dim, k, rng),
                }
            })
            .collect();
        let head = Linear::new(store, "decoder.head", k, config.classes, rng);
        Self { fc_in, blocks, head }
    }

    pub fn blocks(&self) -> &[FilmBlock] {
        &self.blocks
    }

    /// Logits and the output of every conditional batchnorm site.
    pub fn forward_traced<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        points: Var,
        code: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let mut sites = Vec::with_capacity(2 * self.blocks.len());
        let mut h = self.fc_in.forward(cx, points)?;
        for b in &self.blocks {
            let mut a = b.fc0.forward(cx, h)?;
            a = b.cbn0.forward(cx, a, code)?;
            sites.push(a);
            a = cx.g.relu(a);
            a = b.fc1.forward(cx, a)?;
            a = b.cbn1.forward(cx, a, code)?;
            sites.push(a);
            a = cx.g.relu(a);
            h = cx.g.add(h, a)?;
        }
        let h = cx.g.relu(h);
        Ok((self.head.forward(cx, h)?, sites))
    }

    pub(super) fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, points: Var, code: Var) -> Result<Var> {
        Ok(self.forward_traced(cx, points, code)?.0)
    }
}
