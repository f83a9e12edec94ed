//! Potsdam-style tiles: `<dir>/images/<tile>.png` with RGB imagery and
//! `<dir>/labels/<tile>.png` with the benchmark's label colors.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::SegSample;
use crate::diffcore::Tensor;
use crate::error::{ensure, Error, Result};
use crate::fields::NUM_CLASSES;

/// Label colors indexed by class: impervious surfaces, building, low
/// vegetation, tree, car, clutter.
pub const CLASS_COLORS: [[u8; 3]; NUM_CLASSES] = [
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
];

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "impervious",
    "building",
    "low_vegetation",
    "tree",
    "car",
    "clutter",
];

pub fn class_color(class: u8) -> Result<[u8; 3]> {
    CLASS_COLORS
        .get(class as usize)
        .copied()
        .ok_or_else(|| Error::Contract(format!("class {class} has no color")))
}

pub fn color_class(rgb: [u8; 3]) -> Option<u8> {
    CLASS_COLORS.iter().position(|&c| c == rgb).map(|i| i as u8)
}

/// Renders a class mask with the label color table.
pub fn render_mask(mask: &[u8], h: usize, w: usize) -> Result<RgbImage> {
    ensure!(mask.len() == h * w, Contract, "mask of {} pixels is not {h}x{w}", mask.len());
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, &c) in mask.iter().enumerate() {
        img.put_pixel((i % w) as u32, (i / w) as u32, Rgb(class_color(c)?));
    }
    Ok(img)
}

/// Decodes a label image; `path` is only used in error messages.
pub fn decode_label_image(img: &RgbImage, path: &Path) -> Result<Vec<u8>> {
    img.enumerate_pixels()
        .map(|(x, y, p)| {
            color_class(p.0).ok_or_else(|| Error::Decode {
                path: path.to_path_buf(),
                x,
                y,
                r: p[0],
                g: p[1],
                b: p[2],
            })
        })
        .collect()
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("non-empty image")
}

pub fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    ensure!(s.len() == 3 && s[0] == 3, Contract, "expected a [3, H, W] image, got {s:?}");
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

fn open_rgb(path: &Path, tile: &str) -> Result<RgbImage> {
    if !path.is_file() {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!("tile '{tile}' has no such file"),
        });
    }
    let img = image::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: format!("tile '{tile}': {e}"),
    })?;
    Ok(img.to_rgb8())
}

pub fn tile_paths(dir: &Path, tile: &str) -> (PathBuf, PathBuf) {
    (
        dir.join("images").join(format!("{tile}.png")),
        dir.join("labels").join(format!("{tile}.png")),
    )
}

/// Loads one image/label pair.
pub fn load_tile(dir: &Path, tile: &str) -> Result<SegSample> {
    let (ip, lp) = tile_paths(dir, tile);
    let img = open_rgb(&ip, tile)?;
    let lab = open_rgb(&lp, tile)?;
    ensure!(
        img.dimensions() == lab.dimensions(),
        Config,
        "tile '{tile}': image is {:?} but label is {:?}",
        img.dimensions(),
        lab.dimensions()
    );
    let mask = decode_label_image(&lab, &lp)?;
    SegSample::new(image_to_tensor(&img), mask)
}

/// Writes a sample in the tile layout under `dir`.
pub fn save_tile(dir: &Path, tile: &str, sample: &SegSample) -> Result<()> {
    let (ip, lp) = tile_paths(dir, tile);
    for p in [&ip, &lp] {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
    }
    tensor_to_image(&sample.image)?.save(&ip)?;
    render_mask(&sample.mask, sample.height(), sample.width())?.save(&lp)?;
    Ok(())
}

/// Reads an RGB image file as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(image_to_tensor(&img.to_rgb8()))
}

/// Writes a class mask as a color-coded PNG.
pub fn write_mask(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    render_mask(mask, h, w)?.save(path)?;
    Ok(())
}

/// Tile names (file stems) found under `<dir>/images`, sorted.
pub fn list_tiles(dir: &Path) -> Result<Vec<String>> {
    let images = dir.join("images");
    let entries = std::fs::read_dir(&images).map_err(|e| Error::Load {
        path: images.clone(),
        reason: e.to_string(),
    })?;
    let mut tiles = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "png") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                tiles.push(stem.to_string());
            }
        }
    }
    tiles.sort();
    Ok(tiles)
}
