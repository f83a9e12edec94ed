//! Encoder + neural-field decoder with its parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use crate::data::{dense_grid, SegSample};
use crate::decoders::{self, NeuralFieldModel};
use crate::diffcore::layers::Ctx;
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::encoder::Encoder;
use crate::error::{ensure, Result};
use crate::fields::{embed_points, PointSet};

#[derive(Clone, Debug)]
pub struct SegmentationModel {
    pub encoder: Encoder,
    pub field: NeuralFieldModel,
    pub params: ParamStore<f32>,
}

/// Stacks `[3, H, W]` images into a `[B, 3, H, W]` tensor.
pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    ensure!(!images.is_empty(), Contract, "empty image batch");
    let shape = images[0].shape().to_vec();
    ensure!(
        images.iter().all(|t| t.shape() == shape.as_slice()),
        Contract,
        "images in a batch must share one shape"
    );
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for t in images {
        data.extend_from_slice(t.data());
    }
    let mut s = vec![images.len()];
    s.extend_from_slice(&shape);
    Tensor::new(s, data)
}

impl SegmentationModel {
    /// Fresh model; initial weights depend only on the config and its training seed.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut params, &mut rng)?;
        let field = NeuralFieldModel::new(&config.model, config.encoder.out_channels(), &mut params, &mut rng)?;
        Ok(Self { encoder, field, params })
    }

    pub fn decoder_parameters(&self) -> usize {
        decoders::count_parameters(&self.params)
    }

    pub fn total_parameters(&self) -> usize {
        self.params.count_scalars("")
    }

    /// Records the logits `[B * S, K]` of `points` (`S` per image, grouped
    /// by image) for a batch of images.
    pub fn logits(&self, g: &mut Graph<f32>, images: Var, points: &[[f64; 2]], train: bool) -> Result<Var> {
        let batch = g.shape(images)[0];
        ensure!(
            points.len() % batch == 0 && !points.is_empty(),
            Contract,
            "{} points cannot be split over {batch} images",
            points.len()
        );
        let per_image = points.len() / batch;
        let mut cx = Ctx::new(g, &self.params, train);
        let fmap = self.encoder.forward(&mut cx, images)?;
        self.decode(&mut cx, fmap, points, per_image)
    }

    fn decode(&self, cx: &mut Ctx<'_, f32>, fmap: Var, points: &[[f64; 2]], per_image: usize) -> Result<Var> {
        let batch = cx.g.shape(fmap)[0];
        let cond = self.field.conditioning(cx.g, fmap, points, per_image)?;
        let emb = cx.g.leaf(embed_points(points, self.field.config().embed_levels)?);
        self.field.forward(cx, emb, cond, batch)
    }

    /// Mean cross-entropy of a training batch; `points` holds one labelled
    /// point set per image.
    pub fn loss(&self, g: &mut Graph<f32>, images: &[&Tensor<f32>], points: &[PointSet]) -> Result<Var> {
        ensure!(images.len() == points.len(), Contract, "one point set per image is required");
        let s = points[0].len();
        ensure!(points.iter().all(|p| p.len() == s), Contract, "point sets differ in size");
        let mut coords = Vec::with_capacity(s * points.len());
        let mut labels = Vec::with_capacity(s * points.len());
        for p in points {
            coords.extend_from_slice(p.coords());
            let l = p.labels().ok_or_else(|| crate::Error::Contract("training points need labels".into()))?;
            labels.extend(l.iter().map(|&c| c as usize));
        }
        let x = g.leaf(stack_images(images)?);
        let logits = self.logits(g, x, &coords, true)?;
        g.softmax_cross_entropy(logits, &labels)
    }

    /// Dense eval-mode prediction: one point per pixel, argmax, row-major mask.
    pub fn predict_mask(&self, image: &Tensor<f32>, chunk: usize) -> Result<Vec<u8>> {
        let s = image.shape();
        ensure!(s.len() == 3, Contract, "image must be [3, H, W], got {s:?}");
        let (h, w) = (s[1], s[2]);
        let cfg = self.encoder.config();
        cfg.feature_size(h, w)?;
        let mut g = Graph::new();
        let x = g.leaf(image.clone().reshape(vec![1, s[0], h, w])?);
        let fmap = {
            let mut cx = Ctx::new(&mut g, &self.params, false);
            self.encoder.forward(&mut cx, x)?
        };
        let fvalue = g.value(fmap).clone();
        let grid = dense_grid(h, w)?;
        let classes = self.field.config().classes;
        let mut mask = Vec::with_capacity(h * w);
        for pts in grid.coords().chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let f = g.leaf(fvalue.clone());
            let mut cx = Ctx::new(&mut g, &self.params, false);
            let y = self.decode(&mut cx, f, pts, pts.len())?;
            let logits = g.value(y).data();
            for row in logits.chunks(classes) {
                mask.push(argmax(row) as u8);
            }
        }
        Ok(mask)
    }

    pub fn predict_sample(&self, sample: &SegSample, chunk: usize) -> Result<Vec<u8>> {
        self.predict_mask(&sample.image, chunk)
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
