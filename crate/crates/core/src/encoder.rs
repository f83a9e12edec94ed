//! Small trainable CNN encoder and a receptive-field calculator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::layers::{BatchNorm, Conv2d, Ctx};
use crate::diffcore::{ParamStore, Scalar, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Stem width followed by the output width of every stage.
    pub widths: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64, 128, 128],
        }
    }
}

impl EncoderConfig {
    pub fn with_stages(stages: usize) -> Self {
        let mut widths = Self::default().widths;
        widths.truncate(stages + 1);
        Self {
            widths,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    /// Spatial reduction factor: the stem and every stage halve the size.
    pub fn downsample(&self) -> usize {
        1 << (self.stages() + 1)
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    /// Feature-map size for an `h x w` input.
    pub fn feature_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let d = self.downsample();
        ensure!(
            h % d == 0 && w % d == 0 && h > 0 && w > 0,
            Config,
            "input {h}x{w} is not divisible by the encoder downsample factor {d}"
        );
        Ok((h / d, w / d))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.widths.is_empty() && self.widths.iter().all(|&w| w > 0) && self.in_channels > 0,
            Config,
            "encoder widths must be non-empty and positive"
        );
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    down_bn: BatchNorm,
    conv: Conv2d,
    conv_bn: BatchNorm,
}

/// `stem conv (s2) -> bn -> relu`, then per stage
/// `conv (s2) -> bn -> relu -> conv (s1) -> bn -> relu`.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        config: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let stem = Conv2d::new(store, "encoder.stem", config.in_channels, w[0], 3, 2, 1, rng);
        let stem_bn = BatchNorm::new(store, "encoder.stem_bn", w[0], true);
        let stages = (0..config.stages())
            .map(|i| {
                let name = format!("encoder.stage{i}");
                Stage {
                    down: Conv2d::new(store, &format!("{name}.down"), w[i], w[i + 1], 3, 2, 1, rng),
                    down_bn: BatchNorm::new(store, &format!("{name}.down_bn"), w[i + 1], true),
                    conv: Conv2d::new(store, &format!("{name}.conv"), w[i + 1], w[i + 1], 3, 1, 1, rng),
                    conv_bn: BatchNorm::new(store, &format!("{name}.conv_bn"), w[i + 1], true),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            stem,
            stem_bn,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `[B, C_in, H, W] -> [B, c, H / d, W / d]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let s = cx.g.shape(image).to_vec();
        ensure!(
            s.len() == 4 && s[1] == self.config.in_channels,
            Contract,
            "encoder input must be [B, {}, H, W], got {s:?}",
            self.config.in_channels
        );
        self.config.feature_size(s[2], s[3])?;
        let x = self.stem.forward(cx, image)?;
        let x = self.stem_bn.forward(cx, x)?;
        let mut x = cx.g.relu(x);
        for st in &self.stages {
            x = st.down.forward(cx, x)?;
            x = st.down_bn.forward(cx, x)?;
            x = cx.g.relu(x);
            x = st.conv.forward(cx, x)?;
            x = st.conv_bn.forward(cx, x)?;
            x = cx.g.relu(x);
        }
        Ok(x)
    }
}

/// One convolution (or pooling) layer as seen by [`receptive_field`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvLayerSpec {
    pub const fn new(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation: 1,
        }
    }
}

/// Receptive field in input pixels of one output cell of a layer stack.
pub fn receptive_field(layers: &[ConvLayerSpec]) -> Result<usize> {
    ensure!(!layers.is_empty(), Contract, "receptive_field: empty layer list");
    let (mut field, mut jump) = (1usize, 1usize);
    for (i, l) in layers.iter().enumerate() {
        ensure!(
            l.kernel >= 1 && l.stride >= 1 && l.dilation >= 1,
            Contract,
            "receptive_field: layer {i} has a zero kernel, stride or dilation"
        );
        field += (l.kernel - 1) * l.dilation * jump;
        jump *= l.stride;
    }
    Ok(field)
}

/// Main-path layers of ResNet34: 7x7/2 stem, 3x3/2 max-pool and four stages
/// of [3, 4, 6, 3] basic blocks (two 3x3 convolutions each), where the first
/// convolution of stages 2-4 has stride 2.
pub fn resnet34_layers() -> Vec<ConvLayerSpec> {
    let mut layers = vec![ConvLayerSpec::new(7, 2), ConvLayerSpec::new(3, 2)];
    for (stage, blocks) in [3usize, 4, 6, 3].into_iter().enumerate() {
        for b in 0..blocks {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            layers.push(ConvLayerSpec::new(3, stride));
            layers.push(ConvLayerSpec::new(3, 1));
        }
    }
    layers
}

/// Layer list of an [`Encoder`] built from `config`.
pub fn encoder_layers(config: &EncoderConfig) -> Vec<ConvLayerSpec> {
    let mut layers = vec![ConvLayerSpec::new(3, 2)];
    for _ in 0..config.stages() {
        layers.push(ConvLayerSpec::new(3, 2));
        layers.push(ConvLayerSpec::new(3, 1));
    }
    layers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Graph, Tensor};
    use crate::Error;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn output_shape(config: &EncoderConfig, h: usize, w: usize) -> Result<Vec<usize>> {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(config, &mut store, &mut rng)?;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2, 3, h, w], 0.5));
        let mut cx = Ctx::new(&mut g, &store, true);
        let y = enc.forward(&mut cx, x)?;
        Ok(g.shape(y).to_vec())
    }

    #[test]
    fn output_shapes_follow_downsample() {
        let desk = EncoderConfig::default();
        assert_eq!(desk.downsample(), 32);
        assert_eq!(desk.feature_size(256, 256).unwrap(), (8, 8));
        assert_eq!(desk.feature_size(512, 512).unwrap(), (16, 16));
        assert_eq!(output_shape(&desk, 64, 96).unwrap(), vec![2, 128, 2, 3]);
        let three = EncoderConfig::with_stages(3);
        assert_eq!(three.downsample(), 16);
        assert_eq!(output_shape(&three, 64, 64).unwrap(), vec![2, 128, 4, 4]);
    }

    #[test]
    fn indivisible_input_is_a_configuration_error() {
        let desk = EncoderConfig::default();
        assert!(matches!(output_shape(&desk, 48, 64), Err(Error::Config(_))));
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(&[ConvLayerSpec::new(3, 1)]).unwrap(), 3);
        assert_eq!(receptive_field(&[ConvLayerSpec::new(3, 1); 2]).unwrap(), 5);
        assert_eq!(receptive_field(&resnet34_layers()).unwrap(), 899);
        assert!(matches!(receptive_field(&[]), Err(Error::Contract(_))));
        let dilated = ConvLayerSpec {
            kernel: 3,
            stride: 1,
            dilation: 2,
        };
        assert_eq!(receptive_field(&[dilated]).unwrap(), 5);
    }

    fn layer() -> impl Strategy<Value = ConvLayerSpec> {
        (1usize..8, 1usize..4, 1usize..3).prop_map(|(kernel, stride, dilation)| ConvLayerSpec {
            kernel,
            stride,
            dilation,
        })
    }

    proptest! {
        #[test]
        fn receptive_field_is_monotone(layers in prop::collection::vec(layer(), 1..8), idx in 0usize..8, extra in layer()) {
            let base = receptive_field(&layers).unwrap();
            let mut longer = layers.clone();
            longer.push(extra);
            prop_assert!(receptive_field(&longer).unwrap() >= base);
            let i = idx % layers.len();
            let mut wider = layers.clone();
            wider[i].kernel += 2;
            prop_assert!(receptive_field(&wider).unwrap() >= base);
        }
    }
}
