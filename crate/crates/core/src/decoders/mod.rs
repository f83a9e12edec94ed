//! Conditional neural-field decoders: embedded points plus a conditioning
//! input in, per-point class logits out.

mod attention;
mod concat;
mod film;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::CrossAttentionDecoder;
pub use concat::ConcatDecoder;
pub use film::FilmDecoder;

use crate::diffcore::layers::Ctx;
use crate::diffcore::{Graph, ParamStore, Scalar, Var};
use crate::error::{ensure, Result};
use crate::fields::{self, point_embed_dim, CodeSource, NUM_CLASSES};

/// Prefix of every decoder parameter name.
pub const PARAM_PREFIX: &str = "decoder.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Concat,
    Film,
    CrossAttention,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Self::Concat => "Concat",
            Self::Film => "FiLM",
            Self::CrossAttention => "Cross-Attention",
        }
    }
}

/// The seven compared strategy / code-source pairs, in report order.
pub const ALL_STRATEGIES: [(Strategy, CodeSource); 7] = [
    (Strategy::Concat, CodeSource::Global),
    (Strategy::Concat, CodeSource::Local),
    (Strategy::Concat, CodeSource::Combined),
    (Strategy::Film, CodeSource::Global),
    (Strategy::Film, CodeSource::Local),
    (Strategy::Film, CodeSource::Combined),
    (Strategy::CrossAttention, CodeSource::Tokens),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub strategy: Strategy,
    pub code_source: CodeSource,
    /// Hidden width `k`.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Number of repeated blocks; defaults to 1 (concat, FiLM) or 2 (cross-attention).
    #[serde(default)]
    pub blocks: Option<usize>,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Fourier embedding levels `l`.
    #[serde(default = "default_levels")]
    pub embed_levels: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Append cell-center embeddings to feature tokens.
    #[serde(default = "default_true")]
    pub positional_tokens: bool,
}

fn default_hidden() -> usize {
    512
}
fn default_heads() -> usize {
    8
}
fn default_levels() -> usize {
    4
}
fn default_classes() -> usize {
    NUM_CLASSES
}
fn default_true() -> bool {
    true
}

impl DecoderConfig {
    pub fn new(strategy: Strategy, code_source: CodeSource) -> Self {
        Self {
            strategy,
            code_source,
            hidden: default_hidden(),
            blocks: None,
            heads: default_heads(),
            embed_levels: default_levels(),
            classes: default_classes(),
            positional_tokens: true,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.unwrap_or(match self.strategy {
            Strategy::CrossAttention => 2,
            _ => 1,
        })
    }

    pub fn embed_dim(&self) -> usize {
        point_embed_dim(self.embed_levels)
    }

    /// Width of the conditioning rows for an encoder with `channels` channels.
    pub fn cond_dim(&self, channels: usize) -> usize {
        match self.code_source {
            CodeSource::Tokens if self.positional_tokens => channels + self.embed_dim(),
            s => s.code_dim(channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (self.strategy == Strategy::CrossAttention) == (self.code_source == CodeSource::Tokens),
            Config,
            "{:?} cannot be combined with the {:?} code source",
            self.strategy,
            self.code_source
        );
        ensure!(self.hidden >= 1 && self.classes >= 1, Config, "hidden width and classes must be positive");
        ensure!(self.num_blocks() >= 1, Config, "at least one block is required");
        ensure!(
            self.heads >= 1 && self.hidden % self.heads == 0,
            Config,
            "hidden width {} is not divisible by {} heads",
            self.hidden,
            self.heads
        );
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{} / {}", self.strategy.label(), self.code_source.label())
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    Concat(ConcatDecoder),
    Film(FilmDecoder),
    CrossAttention(CrossAttentionDecoder),
}

/// A decoder together with its configuration. Parameter values live in the
/// [`ParamStore`] the model was created with.
#[derive(Clone, Debug)]
pub struct NeuralFieldModel {
    config: DecoderConfig,
    channels: usize,
    decoder: Decoder,
}

impl NeuralFieldModel {
    /// Builds a decoder for feature maps with `channels` channels.
    pub fn new<T: Scalar>(
        config: &DecoderConfig,
        channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.cond_dim(channels);
        let decoder = match config.strategy {
            Strategy::Concat => Decoder::Concat(ConcatDecoder::new(config, d, store, rng)),
            Strategy::Film => Decoder::Film(FilmDecoder::new(config, d, store, rng)),
            Strategy::CrossAttention => {
                Decoder::CrossAttention(CrossAttentionDecoder::new(config, d, store, rng)?)
            }
        };
        Ok(Self {
            config: config.clone(),
            channels,
            decoder,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_cross_attention(&self) -> Option<&CrossAttentionDecoder> {
        match &self.decoder {
            Decoder::CrossAttention(d) => Some(d),
            _ => None,
        }
    }

    pub fn as_film(&self) -> Option<&FilmDecoder> {
        match &self.decoder {
            Decoder::Film(d) => Some(d),
            _ => None,
        }
    }

    /// Conditioning for a batched feature map `[B, c, h, w]`: per-point code
    /// rows `[B * per_image, d]` or a token set `[B * h * w, d_tok]`.
    pub fn conditioning<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        fmap: Var,
        coords: &[[f64; 2]],
        per_image: usize,
    ) -> Result<Var> {
        match self.config.code_source {
            CodeSource::Tokens => fields::tokens_var(
                g,
                fmap,
                self.config.embed_levels,
                self.config.positional_tokens,
            ),
            s => fields::code_var(g, s, fmap, coords, per_image),
        }
    }

    /// Logits `[B * S, K]` for embedded points `[B * S, e]` and the
    /// conditioning produced by [`NeuralFieldModel::conditioning`].
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        points: Var,
        cond: Var,
        batch: usize,
    ) -> Result<Var> {
        let ps = cx.g.shape(points).to_vec();
        ensure!(
            ps.len() == 2 && ps[1] == self.config.embed_dim(),
            Contract,
            "point embeddings must be [N, {}], got {ps:?}",
            self.config.embed_dim()
        );
        let cs = cx.g.shape(cond).to_vec();
        let d = self.config.cond_dim(self.channels);
        ensure!(
            cs.len() == 2 && cs[1] == d,
            Contract,
            "conditioning must have width {d}, got {cs:?}"
        );
        match &self.decoder {
            Decoder::Concat(dec) => {
                ensure!(cs[0] == ps[0], Contract, "{} codes for {} points", cs[0], ps[0]);
                dec.forward(cx, points, cond)
            }
            Decoder::Film(dec) => {
                ensure!(cs[0] == ps[0], Contract, "{} codes for {} points", cs[0], ps[0]);
                dec.forward(cx, points, cond)
            }
            Decoder::CrossAttention(dec) => Ok(dec.forward(cx, points, cond, batch)?.0),
        }
    }

    pub fn count_parameters<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        count_parameters(store)
    }
}

/// Trainable scalars of the decoder parameters in `store` (running
/// statistics are buffers and not counted).
pub fn count_parameters<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.count_scalars(PARAM_PREFIX)
}
