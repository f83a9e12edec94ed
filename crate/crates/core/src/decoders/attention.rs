use rand::Rng;

use super::DecoderConfig;
use crate::diffcore::layers::{Ctx, LayerNorm, Linear, MultiHeadAttention};
use crate::diffcore::{ParamStore, Scalar, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_mlp: LayerNorm,
    mlp0: Linear,
    mlp1: Linear,
}

/// Pre-norm transformer decoder: point queries attend over projected feature tokens.
#[derive(Clone, Debug)]
pub struct CrossAttentionDecoder {
    token_proj: Linear,
    query_in: Linear,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Linear,
}

impl CrossAttentionDecoder {
    pub(super) fn new<T: Scalar>(
        config: &DecoderConfig,
        token_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = config.hidden;
        let token_proj = Linear::new(store, "decoder.token_proj", token_dim, k, rng);
        let query_in = Linear::new(store, "decoder.query_in", config.embed_dim(), k, rng);
        let blocks = (0..config.num_blocks())
            .map(|i| {
                let name = format!("decoder.block{i}");
                Ok(Block {
                    ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), k),
                    attn: MultiHeadAttention::new(store, &format!("{name}.attn"), k, config.heads, rng)?,
                    ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), k),
                    mlp0: Linear::new(store, &format!("{name}.mlp0"), k, 2 * k, rng),
                    mlp1: Linear::new(store, &format!("{name}.mlp1"), 2 * k, k, rng),
                })
            })
            .collect::<Result<_>>()?;
        let ln_out = LayerNorm::new(store, "decoder.ln_out", k);
        let head = Linear::new(store, "decoder.head", k, config.classes, rng);
        Ok(Self {
            token_proj,
            query_in,
            blocks,
            ln_out,
            head,
        })
    }

    /// Logits `[B * S, K]` and the attention output of every block.
    /// `tokens` is `[B * T, d_tok]` with `T >= 1` tokens per image.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        points: Var,
        tokens: Var,
        batch: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let rows = cx.g.shape(tokens)[0];
        ensure!(
            batch >= 1 && rows >= batch && rows % batch == 0,
            Contract,
            "{rows} token rows cannot be split into {batch} non-empty token sets"
        );
        let tokens = self.token_proj.forward(cx, tokens)?;
        let mut q = self.query_in.forward(cx, points)?;
        let mut attended = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let n = b.ln_attn.forward(cx, q)?;
            let a = b.attn.forward(cx, n, tokens, batch)?;
            attended.push(a);
            q = cx.g.add(q, a)?;
            let n = b.ln_mlp.forward(cx, q)?;
            let m = b.mlp0.forward(cx, n)?;
            let m = cx.g.relu(m);
            let m = b.mlp1.forward(cx, m)?;
            q = cx.g.add(q, m)?;
        }
        let q = self.ln_out.forward(cx, q)?;
        Ok((self.head.forward(cx, q)?, attended))
    }
}
