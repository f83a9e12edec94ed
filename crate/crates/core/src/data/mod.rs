//! Samples, datasets, augmentation and point sampling.

mod synthetic;
mod tiles;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use synthetic::{generate_synthetic, MIN_SIZE, NOISE_SIGMA};
pub use tiles::{
    class_color, color_class, decode_label_image, image_to_tensor, list_tiles, load_tile, read_image, render_mask,
    save_tile, tensor_to_image, tile_paths, write_mask, CLASS_COLORS, CLASS_NAMES,
};

use crate::diffcore::Tensor;
use crate::error::{ensure, Result};
use crate::fields::{PointSet, NUM_CLASSES};

/// An RGB image `[3, H, W]` in `[0, 1]` with its row-major class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn new(image: Tensor<f32>, mask: Vec<u8>) -> Result<Self> {
        let s = image.shape();
        ensure!(s.len() == 3 && s[0] == 3, Contract, "image must be [3, H, W], got {s:?}");
        ensure!(
            mask.len() == s[1] * s[2],
            Contract,
            "mask has {} pixels, image is {}x{}",
            mask.len(),
            s[1],
            s[2]
        );
        ensure!(
            image.data().iter().all(|v| (0.0..=1.0).contains(v)),
            Contract,
            "image values must lie in [0, 1]"
        );
        ensure!(
            mask.iter().all(|&c| (c as usize) < NUM_CLASSES),
            Contract,
            "mask contains a class outside [0, {NUM_CLASSES})"
        );
        Ok(Self { image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.mask[y * self.width() + x]
    }
}

/// A sample that is produced on demand.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleRef {
    Synthetic { seed: u64, height: usize, width: usize },
    Tile { dir: PathBuf, name: String },
}

impl SampleRef {
    pub fn load(&self) -> Result<SegSample> {
        match self {
            Self::Synthetic { seed, height, width } => generate_synthetic(*seed, *height, *width),
            Self::Tile { dir, name } => load_tile(dir, name),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Synthetic { seed, .. } => format!("synthetic-{seed}"),
            Self::Tile { name, .. } => name.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl DatasetSplit {
    pub fn get(&self, split: Split) -> &[SampleRef] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Seed of the `index`-th synthetic image of a dataset with base `seed`.
/// Train, val and test occupy consecutive index ranges, so the splits never
/// share an image.
pub fn synthetic_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1 << 24).wrapping_add(index as u64)
}

pub fn synthetic_split(seed: u64, size: usize, counts: [usize; 3]) -> Result<DatasetSplit> {
    ensure!(
        counts.iter().sum::<usize>() < 1 << 24,
        Config,
        "synthetic datasets are limited to 2^24 images"
    );
    let mut next = 0;
    let mut take = |n: usize| {
        let refs = (next..next + n)
            .map(|i| SampleRef::Synthetic {
                seed: synthetic_seed(seed, i),
                height: size,
                width: size,
            })
            .collect();
        next += n;
        refs
    };
    Ok(DatasetSplit {
        train: take(counts[0]),
        val: take(counts[1]),
        test: take(counts[2]),
    })
}

/// Tile dataset partitioned by explicit tile lists. Tiles are referenced
/// lazily; only the presence of every image/label pair is checked here.
pub fn load_tile_dataset(
    dir: &Path,
    train: &[String],
    val: &[String],
    test: &[String],
) -> Result<DatasetSplit> {
    let refs = |names: &[String]| -> Result<Vec<SampleRef>> {
        names
            .iter()
            .map(|name| {
                let (ip, lp) = tile_paths(dir, name);
                for p in [ip, lp] {
                    ensure_file(&p, name)?;
                }
                Ok(SampleRef::Tile {
                    dir: dir.to_path_buf(),
                    name: name.clone(),
                })
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: refs(train)?,
        val: refs(val)?,
        test: refs(test)?,
    })
}

fn ensure_file(path: &Path, tile: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(crate::Error::Load {
            path: path.to_path_buf(),
            reason: format!("tile '{tile}' is missing this file"),
        })
    }
}

/// Aligned `size x size` crop of image and mask at `(top, left)`.
pub fn crop_at(sample: &SegSample, top: usize, left: usize, size: usize) -> Result<SegSample> {
    let (h, w) = (sample.height(), sample.width());
    ensure!(
        size >= 1 && top + size <= h && left + size <= w,
        Contract,
        "crop {size}x{size} at ({top}, {left}) exceeds the {h}x{w} sample"
    );
    let src = sample.image.data();
    let mut image = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in top..top + size {
            let row = (c * h + y) * w;
            image.extend_from_slice(&src[row + left..row + left + size]);
        }
    }
    let mut mask = Vec::with_capacity(size * size);
    for y in top..top + size {
        mask.extend_from_slice(&sample.mask[y * w + left..y * w + left + size]);
    }
    Ok(SegSample {
        image: Tensor::new(vec![3, size, size], image)?,
        mask,
    })
}

/// Crop at an offset drawn uniformly from all valid positions. Returns the
/// crop and its `(top, left)` offset.
pub fn random_crop(sample: &SegSample, size: usize, rng: &mut impl Rng) -> Result<(SegSample, (usize, usize))> {
    let (h, w) = (sample.height(), sample.width());
    ensure!(
        size >= 1 && size <= h.min(w),
        Contract,
        "crop size {size} exceeds the {h}x{w} sample"
    );
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    Ok((crop_at(sample, top, left, size)?, (top, left)))
}

/// Mirrors image and mask left-right and/or top-bottom.
pub fn flip(sample: &SegSample, horizontal: bool, vertical: bool) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let src_index = |y: usize, x: usize| {
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        sy * w + sx
    };
    let src = sample.image.data();
    let mut image = vec![0.0f32; src.len()];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (d, s) = (y * w + x, src_index(y, x));
            mask[d] = sample.mask[s];
            for c in 0..3 {
                image[c * h * w + d] = src[c * h * w + s];
            }
        }
    }
    SegSample {
        image: Tensor::new(vec![3, h, w], image).expect("same shape"),
        mask,
    }
}

/// Horizontal and vertical flips, each with probability 0.5.
pub fn flip_augment(sample: &SegSample, rng: &mut impl Rng) -> SegSample {
    let horizontal = rng.random_bool(0.5);
    let vertical = rng.random_bool(0.5);
    flip(sample, horizontal, vertical)
}

fn pixel_center(y: usize, x: usize, h: usize, w: usize) -> [f64; 2] {
    [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64]
}

/// `s` pixels drawn uniformly with replacement, as half-pixel centers with
/// the mask labels of their pixels.
pub fn sample_points_train(mask: &[u8], h: usize, w: usize, s: usize, rng: &mut impl Rng) -> Result<PointSet> {
    ensure!(s >= 1, Contract, "at least one point must be sampled");
    ensure!(
        h >= 1 && w >= 1 && mask.len() == h * w,
        Contract,
        "mask of {} pixels is not {h}x{w}",
        mask.len()
    );
    let mut coords = Vec::with_capacity(s);
    let mut labels = Vec::with_capacity(s);
    for _ in 0..s {
        let i = rng.random_range(0..h * w);
        coords.push(pixel_center(i / w, i % w, h, w));
        labels.push(mask[i]);
    }
    PointSet::new(coords, Some(labels))
}

/// One unlabeled point per pixel, row-major: point `i * w + j` is pixel `(i, j)`.
pub fn dense_grid(h: usize, w: usize) -> Result<PointSet> {
    ensure!(h >= 1 && w >= 1, Contract, "dense grid needs a non-empty image");
    let coords = (0..h)
        .flat_map(|y| (0..w).map(move |x| pixel_center(y, x, h, w)))
        .collect();
    PointSet::new(coords, None)
}
