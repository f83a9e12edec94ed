//! WebAssembly bindings for the static demo page in `www/`.

use wasm_bindgen::prelude::*;

use nfseg::data::{class_color, generate_synthetic, tensor_to_image, CLASS_COLORS, CLASS_NAMES};
use nfseg::encoder::{receptive_field, resnet34_layers, ConvLayerSpec};
use nfseg::fields::fourier_embed;

/// A synthetic scene as RGBA pixel buffers.
#[wasm_bindgen]
pub struct Scene {
    size: usize,
    image: Vec<u8>,
    mask: Vec<u8>,
    counts: Vec<u32>,
}

#[wasm_bindgen]
impl Scene {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        self.mask.clone()
    }

    /// Pixels per class, in class order.
    pub fn class_counts(&self) -> Vec<u32> {
        self.counts.clone()
    }
}

fn rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Generates the scene of `seed` at `size x size` pixels.
#[wasm_bindgen]
pub fn render_scene(seed: u64, size: usize) -> Result<Scene, String> {
    let s = generate_synthetic(seed, size, size).map_err(|e| e.to_string())?;
    let image = tensor_to_image(&s.image).map_err(|e| e.to_string())?;
    let mut mask = Vec::with_capacity(size * size * 4);
    let mut counts = vec![0u32; CLASS_NAMES.len()];
    for &c in &s.mask {
        let [r, g, b] = class_color(c).map_err(|e| e.to_string())?;
        mask.extend_from_slice(&[r, g, b, 255]);
        counts[c as usize] += 1;
    }
    Ok(Scene {
        size,
        image: rgba(image.as_raw()),
        mask,
        counts,
    })
}

#[wasm_bindgen]
pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Label colors as flat RGB triples, in class order.
#[wasm_bindgen]
pub fn class_palette() -> Vec<u8> {
    CLASS_COLORS.iter().flatten().copied().collect()
}

/// Fourier embedding of `samples` evenly spaced x in [0, 1], row-major
/// `[samples, 2 (levels + 1)]`.
#[wasm_bindgen]
pub fn fourier_curves(levels: usize, samples: usize) -> Result<Vec<f64>, String> {
    if samples < 2 || levels > 12 {
        return Err("need at least 2 samples and at most 12 levels".into());
    }
    let mut out = Vec::with_capacity(samples * 2 * (levels + 1));
    for i in 0..samples {
        let x = i as f64 / (samples - 1) as f64;
        out.extend(fourier_embed(x, levels).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

/// Receptive field of a stack given as matching kernel and stride lists.
#[wasm_bindgen]
pub fn stack_receptive_field(kernels: &[u32], strides: &[u32]) -> Result<u32, String> {
    if kernels.len() != strides.len() {
        return Err(format!("{} kernels but {} strides", kernels.len(), strides.len()));
    }
    let layers: Vec<ConvLayerSpec> = kernels
        .iter()
        .zip(strides)
        .map(|(&k, &s)| ConvLayerSpec::new(k as usize, s as usize))
        .collect();
    receptive_field(&layers)
        .map(|f| f as u32)
        .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn resnet34_receptive_field() -> u32 {
    receptive_field(&resnet34_layers()).expect("non-empty layer list") as u32
}
