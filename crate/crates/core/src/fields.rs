//! Point embeddings and the conditional codes derived from a feature map.
//!
//! Coordinates are normalised to `[0, 1]^2` with pixel `(i, j)` of an
//! `H x W` image at `((j + 0.5) / W, (i + 0.5) / H)`. Feature maps are
//! aligned to the same square, so feature cell `(i, j)` of an `h x w` map is
//! centred at `((j + 0.5) / w, (i + 0.5) / h)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Scalar, Tensor, Var};
use crate::error::{ensure, Error, Result};

pub const NUM_CLASSES: usize = 6;

/// Where the conditioning of a decoder comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeSource {
    /// Spatial mean of the feature map, shared by every point of an image.
    Global,
    /// Bilinear lookup of the feature map at the point.
    Local,
    /// `global ∥ local`.
    Combined,
    /// Every feature cell as a token (cross-attention only).
    Tokens,
}

impl CodeSource {
    /// Width of the per-point code for a feature map with `channels` channels.
    pub fn code_dim(self, channels: usize) -> usize {
        match self {
            Self::Global | Self::Local => channels,
            Self::Combined => 2 * channels,
            Self::Tokens => channels,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Local => "local",
            Self::Combined => "global+local",
            Self::Tokens => "feature tokens",
        }
    }
}

/// Sampled points of one image with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    coords: Vec<[f64; 2]>,
    labels: Option<Vec<u8>>,
}

impl PointSet {
    pub fn new(coords: Vec<[f64; 2]>, labels: Option<Vec<u8>>) -> Result<Self> {
        ensure!(!coords.is_empty(), Contract, "point set is empty");
        if let Some(p) = coords
            .iter()
            .find(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
        {
            return Err(Error::Contract(format!("point {p:?} outside [0,1]^2")));
        }
        if let Some(l) = &labels {
            ensure!(
                l.len() == coords.len(),
                Contract,
                "{} labels for {} points",
                l.len(),
                coords.len()
            );
            ensure!(
                l.iter().all(|&c| (c as usize) < NUM_CLASSES),
                Contract,
                "label outside [0, {NUM_CLASSES})"
            );
        }
        Ok(Self { coords, labels })
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Subset `[start, end)` of the points.
    pub fn slice(&self, start: usize, end: usize) -> PointSet {
        PointSet {
            coords: self.coords[start..end].to_vec(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        }
    }
}

/// Conditioning handed to a decoder for one image.
#[derive(Clone, Debug, PartialEq)]
pub enum ConditioningInput<T = f32> {
    /// `[S, d]` code rows, identical for every point.
    Global(Tensor<T>),
    /// `[S, d]` code rows, one lookup per point.
    Local(Tensor<T>),
    /// `[S, d_global + d_local]`.
    Combined(Tensor<T>),
    /// `[h * w, d_tok]` token set.
    Tokens(Tensor<T>),
}

impl<T: Scalar> ConditioningInput<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        match self {
            Self::Global(t) | Self::Local(t) | Self::Combined(t) | Self::Tokens(t) => t,
        }
    }

    /// Builds the conditioning of `source` for one feature map `[c, h, w]`.
    pub fn build(
        source: CodeSource,
        map: &Tensor<T>,
        points: &PointSet,
        embed_levels: usize,
        positional: bool,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let fmap = leaf_map(&mut g, map)?;
        if source == CodeSource::Tokens {
            let v = tokens_var(&mut g, fmap, embed_levels, positional)?;
            return Ok(Self::Tokens(g.value(v).clone()));
        }
        let v = code_var(&mut g, source, fmap, points.coords(), points.len())?;
        let t = g.value(v).clone();
        Ok(match source {
            CodeSource::Global => Self::Global(t),
            CodeSource::Local => Self::Local(t),
            _ => Self::Combined(t),
        })
    }
}

/// `(sin(2^0 pi x), ..., sin(2^l pi x), cos(2^0 pi x), ..., cos(2^l pi x))`.
pub fn fourier_embed(x: f64, levels: usize) -> Result<Vec<f64>> {
    ensure!(
        (0.0..=1.0).contains(&x),
        Contract,
        "fourier_embed: coordinate {x} outside [0,1]"
    );
    let mut out = Vec::with_capacity(2 * (levels + 1));
    let freqs = || (0..=levels).map(|i| (1u64 << i) as f64 * PI * x);
    out.extend(freqs().map(f64::sin));
    out.extend(freqs().map(f64::cos));
    Ok(out)
}

/// Embedding length of one point: `4 (l + 1)`.
pub fn point_embed_dim(levels: usize) -> usize {
    4 * (levels + 1)
}

/// `fourier_embed(x) ∥ fourier_embed(y)`.
pub fn embed_point(p: [f64; 2], levels: usize) -> Result<Vec<f64>> {
    let mut v = fourier_embed(p[0], levels)?;
    v.extend(fourier_embed(p[1], levels)?);
    Ok(v)
}

/// Embeds a list of points into a `[N, 4 (l + 1)]` tensor.
pub fn embed_points<T: Scalar>(coords: &[[f64; 2]], levels: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(coords.len() * point_embed_dim(levels));
    for &p in coords {
        data.extend(embed_point(p, levels)?.into_iter().map(T::of));
    }
    Tensor::new(vec![coords.len(), point_embed_dim(levels)], data)
}

fn leaf_map<T: Scalar>(g: &mut Graph<T>, map: &Tensor<T>) -> Result<Var> {
    ensure!(
        map.shape().len() == 3,
        Contract,
        "feature map must be [c, h, w], got {:?}",
        map.shape()
    );
    let mut s = vec![1];
    s.extend_from_slice(map.shape());
    Ok(g.leaf(map.clone().reshape(s)?))
}

/// Per-channel spatial mean of a `[c, h, w]` map.
pub fn global_code<T: Scalar>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = leaf_map(&mut g, map)?;
    let v = g.global_avg_pool(f)?;
    g.value(v).clone().reshape(vec![map.shape()[0]])
}

/// Half-pixel-aligned bilinear lookup of a `[c, h, w]` map at `p`.
pub fn local_code<T: Scalar>(map: &Tensor<T>, p: [f64; 2]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = leaf_map(&mut g, map)?;
    let v = g.bilinear_sample(f, &[p], 1)?;
    g.value(v).clone().reshape(vec![map.shape()[0]])
}

/// `global_code(map) ∥ local_code(map, p)`.
pub fn combined_code<T: Scalar>(map: &Tensor<T>, p: [f64; 2]) -> Result<Tensor<T>> {
    let mut data = global_code(map)?.into_data();
    data.extend(local_code(map, p)?.into_data());
    Tensor::new(vec![data.len()], data)
}

/// Row-major feature tokens of a `[c, h, w]` map, each carrying the
/// embedding of its cell center when `positional` is set.
pub fn feature_tokens<T: Scalar>(map: &Tensor<T>, levels: usize, positional: bool) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = leaf_map(&mut g, map)?;
    let v = tokens_var(&mut g, f, levels, positional)?;
    Ok(g.value(v).clone())
}

/// Normalised centers of an `h x w` grid in row-major order.
pub fn cell_centers(h: usize, w: usize) -> Vec<[f64; 2]> {
    (0..h)
        .flat_map(|i| (0..w).map(move |j| [(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64]))
        .collect()
}

/// Per-point code rows `[B * per_image, d]` for a batched map `[B, c, h, w]`.
pub fn code_var<T: Scalar>(
    g: &mut Graph<T>,
    source: CodeSource,
    fmap: Var,
    coords: &[[f64; 2]],
    per_image: usize,
) -> Result<Var> {
    match source {
        CodeSource::Global => {
            let pooled = g.global_avg_pool(fmap)?;
            g.repeat_rows(pooled, per_image)
        }
        CodeSource::Local => g.bilinear_sample(fmap, coords, per_image),
        CodeSource::Combined => {
            let pooled = g.global_avg_pool(fmap)?;
            let global = g.repeat_rows(pooled, per_image)?;
            let local = g.bilinear_sample(fmap, coords, per_image)?;
            g.concat_cols(global, local)
        }
        CodeSource::Tokens => Err(Error::Contract(
            "token conditioning has no per-point code".into(),
        )),
    }
}

/// Token set `[B * h * w, c (+ 4 (l + 1))]` for a batched map `[B, c, h, w]`.
pub fn tokens_var<T: Scalar>(g: &mut Graph<T>, fmap: Var, levels: usize, positional: bool) -> Result<Var> {
    let s = g.shape(fmap).to_vec();
    ensure!(s.len() == 4, Contract, "feature map must be [B, c, h, w], got {s:?}");
    let tokens = g.to_tokens(fmap)?;
    if !positional {
        return Ok(tokens);
    }
    let centers = cell_centers(s[2], s[3]);
    let one = embed_points::<T>(&centers, levels)?;
    let mut data = Vec::with_capacity(one.numel() * s[0]);
    for _ in 0..s[0] {
        data.extend_from_slice(one.data());
    }
    let pos = g.leaf(Tensor::new(vec![s[0] * centers.len(), point_embed_dim(levels)], data)?);
    g.concat_cols(tokens, pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn fourier_embed_examples() {
        close(&fourier_embed(0.0, 4).unwrap(), &[0., 0., 0., 0., 0., 1., 1., 1., 1., 1.], 1e-12);
        close(&fourier_embed(1.0, 4).unwrap(), &[0., 0., 0., 0., 0., -1., 1., 1., 1., 1.], 1e-12);
        close(&fourier_embed(0.5, 4).unwrap(), &[1., 0., 0., 0., 0., 0., -1., 1., 1., 1.], 1e-12);
        assert!(matches!(fourier_embed(1.5, 2), Err(Error::Contract(_))));
        assert!(fourier_embed(-0.1, 2).is_err());
    }

    #[test]
    fn embed_point_examples() {
        assert_eq!(embed_point([0.3, 0.9], 4).unwrap().len(), 20);
        close(&embed_point([0.0, 0.0], 1).unwrap(), &[0., 0., 1., 1., 0., 0., 1., 1.], 1e-12);
        close(&embed_point([0.5, 0.0], 1).unwrap(), &[1., 0., 0., -1., 0., 0., 1., 1.], 1e-12);
    }

    fn map_from(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(vec![c, h, w], f)
    }

    #[test]
    fn global_code_examples() {
        let m = map_from(3, 2, 5, |_| 0.7);
        close(global_code(&m).unwrap().data(), &[0.7; 3], 1e-15);
        let m = map_from(1, 2, 2, |i| i as f64);
        assert_eq!(global_code(&m).unwrap().data(), &[1.5]);
    }

    #[test]
    fn global_code_gradient_is_uniform() {
        let m = map_from(2, 3, 4, |i| i as f64 * 0.1);
        let mut g = Graph::new();
        let f = g.leaf(m.reshape(vec![1, 2, 3, 4]).unwrap());
        let p = g.global_avg_pool(f).unwrap();
        let s = g.sum(p);
        let gr = g.backward(s).unwrap();
        for &d in gr.get(f).unwrap() {
            assert!((d - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn local_code_examples() {
        let m = map_from(1, 2, 2, |i| [1.0, 2.0, 3.0, 4.0][i]);
        assert_eq!(local_code(&m, [0.25, 0.25]).unwrap().data(), &[1.0]);
        assert_eq!(local_code(&m, [0.5, 0.5]).unwrap().data(), &[2.5]);
        let top = map_from(1, 2, 2, |i| [0.0, 4.0, 9.0, 9.0][i]);
        assert_eq!(local_code(&top, [0.5, 0.25]).unwrap().data(), &[2.0]);
        assert!(matches!(local_code(&m, [1.2, 0.5]), Err(Error::Contract(_))));
    }

    #[test]
    fn local_code_clamps_to_border_cells() {
        let m = map_from(1, 2, 2, |i| [1.0, 2.0, 3.0, 4.0][i]);
        assert_eq!(local_code(&m, [0.0, 0.0]).unwrap().data(), &[1.0]);
        assert_eq!(local_code(&m, [1.0, 1.0]).unwrap().data(), &[4.0]);
        assert_eq!(local_code(&m, [1.0, 0.0]).unwrap().data(), &[2.0]);
    }

    #[test]
    fn combined_code_examples() {
        let m = map_from(4, 3, 3, |_| -1.25);
        assert_eq!(combined_code(&m, [0.1, 0.8]).unwrap().data(), &[-1.25; 8]);
        let m = map_from(512, 2, 2, |i| i as f64);
        assert_eq!(combined_code(&m, [0.3, 0.3]).unwrap().numel(), 1024);

        let m = map_from(2, 3, 3, |i| (i * i) as f64);
        let a = combined_code(&m, [0.1, 0.2]).unwrap();
        let b = combined_code(&m, [0.9, 0.6]).unwrap();
        assert_eq!(a.data()[..2], b.data()[..2]);
        assert_ne!(a.data()[2..], b.data()[2..]);
    }

    #[test]
    fn feature_token_examples() {
        let m = map_from(512, 8, 8, |i| i as f64);
        let t = feature_tokens(&m, 4, true).unwrap();
        assert_eq!(t.shape(), &[64, 512 + 20]);

        let one = map_from(3, 1, 1, |i| i as f64);
        let t = feature_tokens(&one, 2, true).unwrap();
        let mut expected = vec![0.0, 1.0, 2.0];
        expected.extend(embed_point([0.5, 0.5], 2).unwrap());
        assert_eq!(t.data(), expected.as_slice());

        // cell (i = 0, j = 1) of a 2 x 3 map is token 1
        let m = map_from(2, 2, 3, |i| i as f64);
        let t = feature_tokens(&m, 1, false).unwrap();
        assert_eq!(t.shape(), &[6, 2]);
        assert_eq!(&t.data()[2..4], &[m.at(&[0, 0, 1]), m.at(&[1, 0, 1])]);
        let with_pos = feature_tokens(&m, 1, true).unwrap();
        close(&with_pos.data()[12..20], &embed_point([0.5, 0.25], 1).unwrap(), 0.0);
    }

    #[test]
    fn conditioning_input_kinds() {
        let m = map_from(3, 2, 2, |i| i as f64);
        let pts = PointSet::new(vec![[0.1, 0.1], [0.9, 0.4]], None).unwrap();
        let g = ConditioningInput::build(CodeSource::Global, &m, &pts, 4, true).unwrap();
        let gd = g.tensor().data();
        assert_eq!(gd[..3], gd[3..]);
        let c = ConditioningInput::build(CodeSource::Combined, &m, &pts, 4, true).unwrap();
        assert_eq!(c.tensor().shape(), &[2, 6]);
        let t = ConditioningInput::build(CodeSource::Tokens, &m, &pts, 4, true).unwrap();
        assert_eq!(t.tensor().shape(), &[4, 3 + 20]);
    }

    #[test]
    fn point_set_validation() {
        assert!(PointSet::new(vec![[0.5, 1.01]], None).is_err());
        assert!(PointSet::new(vec![[0.5, 0.5]], Some(vec![6])).is_err());
        assert!(PointSet::new(vec![[0.5, 0.5]], Some(vec![1, 2])).is_err());
        assert!(PointSet::new(vec![[0.5, 0.5]], Some(vec![5])).is_ok());
    }

    proptest! {
        #[test]
        fn fourier_values_are_bounded(x in 0.0f64..=1.0, l in 0usize..8) {
            let v = fourier_embed(x, l).unwrap();
            prop_assert_eq!(v.len(), 2 * (l + 1));
            prop_assert!(v.iter().all(|e| (-1.0..=1.0).contains(e)));
        }

        #[test]
        fn global_code_ignores_spatial_permutation(seed in 0u64..1000) {
            let m = map_from(3, 3, 4, |i| ((i as u64 * 2654435761 + seed) % 97) as f64);
            let perm: Vec<usize> = (0..12).map(|i| (i * 5 + seed as usize) % 12).collect();
            let shuffled = map_from(3, 3, 4, |i| m.data()[(i / 12) * 12 + perm[i % 12]]);
            let a = global_code(&m).unwrap();
            let b = global_code(&shuffled).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn local_code_hits_cell_centers_exactly(h in 1usize..7, w in 1usize..7, seed in 0u64..100) {
            let m = map_from(2, h, w, |i| (i as f64 + seed as f64).sin());
            for (idx, p) in cell_centers(h, w).into_iter().enumerate() {
                let (i, j) = (idx / w, idx % w);
                let v = local_code(&m, p).unwrap();
                prop_assert_eq!(v.data(), &[m.at(&[0, i, j]), m.at(&[1, i, j])][..]);
            }
        }
    }
}
