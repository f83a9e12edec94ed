use rand::Rng;

use super::DecoderConfig;
use crate::diffcore::layers::{BatchNorm, Ctx, Linear};
use crate::diffcore::{ParamStore, Scalar, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
struct Block {
    fc0: Linear,
    bn0: BatchNorm,
    fc1: Linear,
    bn1: BatchNorm,
}

/// Residual MLP whose blocks re-concatenate the code before each linear layer.
#[derive(Clone, Debug)]
pub struct ConcatDecoder {
    fc_in: Linear,
    blocks: Vec<Block>,
    head: Linear,
}

impl ConcatDecoder {
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
                Block {
                    fc0: Linear::without_bias(store, &format!("{name}.fc0"), k + code_dim, k, rng),
                    bn0: BatchNorm::new(store, &format!("{name}.bn0"), k, true),
                    fc1: Linear::without_bias(store, &format!("{name}.fc1"), k + code_dim, k, rng),
                    bn1: BatchNorm::new(store, &format!("{name}.bn1"), k, true),
                }
            })
            .collect();
        let head = Linear::new(store, "decoder.head", k, config.classes, rng);
        Self { fc_in, blocks, head }
    }

    pub(super) fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, points: Var, code: Var) -> Result<Var> {
        let mut h = self.fc_in.forward(cx, points)?;
        for b in &self.blocks {
            let mut a = cx.g.concat_cols(h, code)?;
            a = b.fc0.forward(cx, a)?;
            a = b.bn0.forward(cx, a)?;
            a = cx.g.relu(a);
            a = cx.g.concat_cols(a, code)?;
            a = b.fc1.forward(cx, a)?;
            a = b.bn1.forward(cx, a)?;
            a = cx.g.relu(a);
            h = cx.g.add(h, a)?;
        }
        let h = cx.g.relu(h);
        self.head.forward(cx, h)
    }
}
