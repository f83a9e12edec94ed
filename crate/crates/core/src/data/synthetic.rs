//! Seeded synthetic scenes with six classes laid out like aerial imagery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SegSample;
use crate::diffcore::Tensor;
use crate::error::{ensure, Result};

pub const MIN_SIZE: usize = 32;

/// Pixel-level color noise.
pub const NOISE_SIGMA: f64 = 0.05;

/// Colors shared by buildings and the small on-stripe squares.
const ROOF_COLORS: [[f64; 3]; 4] = [
    [0.75, 0.35, 0.30],
    [0.30, 0.40, 0.75],
    [0.85, 0.80, 0.70],
    [0.55, 0.50, 0.60],
];

/// Object extents in pixels do not depend on the image size; counts scale
/// with the area (or, for stripes, with the side length).
struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f64; 3]>,
    mask: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, class: u8, color: [f64; 3]) {
        let i = y * self.w + x;
        self.mask[i] = class;
        self.rgb[i] = color;
    }

    fn rect(&mut self, y0: usize, x0: usize, hh: usize, ww: usize, class: u8, color: [f64; 3]) {
        for y in y0..(y0 + hh).min(self.h) {
            for x in x0..(x0 + ww).min(self.w) {
                self.paint(y, x, class, color);
            }
        }
    }

    fn ellipse(&mut self, cy: f64, cx: f64, ry: f64, rx: f64, class: u8, color: [f64; 3]) {
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(self.h);
        let x1 = ((cx + rx).ceil() as usize).min(self.w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    self.paint(y, x, class, color);
                }
            }
        }
    }
}

fn jitter(rng: &mut impl Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Number of objects: `lo..=hi` per 64x64 area unit.
fn count(rng: &mut impl Rng, lo: usize, hi: usize, units: usize) -> usize {
    (0..units).map(|_| rng.random_range(lo..=hi)).sum()
}

/// Deterministic scene for `(seed, h, w)`: textured background (0),
/// rectangles (1), stripes (2), ellipses (3), small squares (4) that sit only
/// on stripes and reuse rectangle colors, clutter blobs (5), then Gaussian
/// color noise.
pub fn generate_synthetic(seed: u64, h: usize, w: usize) -> Result<SegSample> {
    ensure!(
        h >= MIN_SIZE && w >= MIN_SIZE,
        Contract,
        "synthetic images must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area_units = ((h * w) as f64 / 4096.0).round().max(1.0) as usize;
    let side_units = (h.max(w) as f64 / 64.0).round().max(1.0) as usize;

    // Background: a muted base color with a low-frequency texture.
    let base = jitter(&mut rng, [0.55, 0.52, 0.45], 0.05);
    let (fy, fx) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
    let (py, px) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let mut rgb = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let t = 0.04 * ((y as f64 * fy + py).sin() + (x as f64 * fx + px).sin());
            rgb.push(base.map(|c| c + t));
        }
    }
    let mut cv = Canvas {
        h,
        w,
        rgb,
        mask: vec![0; h * w],
    };

    let n_stripes = count(&mut rng, 1, 2, side_units);
    for _ in 0..n_stripes {
        let width = rng.random_range(6..=9);
        let color = jitter(&mut rng, [0.28, 0.28, 0.30], 0.03);
        if rng.random_bool(0.5) {
            let y = rng.random_range(0..h - width);
            cv.rect(y, 0, width, w, 2, color);
        } else {
            let x = rng.random_range(0..w - width);
            cv.rect(0, x, h, width, 2, color);
        }
    }

    for _ in 0..count(&mut rng, 1, 3, area_units) {
        let (hh, ww) = (rng.random_range(8..=16), rng.random_range(8..=16));
        let (y, x) = (rng.random_range(0..=h - hh), rng.random_range(0..=w - ww));
        let roof = ROOF_COLORS[rng.random_range(0..ROOF_COLORS.len())];
        let color = jitter(&mut rng, roof, 0.04);
        cv.rect(y, x, hh, ww, 1, color);
    }

    for _ in 0..count(&mut rng, 1, 3, area_units) {
        let (ry, rx) = (rng.random_range(3.0..7.0), rng.random_range(3.0..7.0));
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let color = jitter(&mut rng, [0.20, 0.50, 0.20], 0.05);
        cv.ellipse(cy, cx, ry, rx, 3, color);
    }

    for _ in 0..count(&mut rng, 0, 2, area_units) {
        let r = rng.random_range(1.5..3.0);
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let color = [rng.random(), rng.random(), rng.random()];
        cv.ellipse(cy, cx, r, r, 5, color);
    }

    // Small squares: the footprint plus a one-pixel ring must be visible
    // stripe (or the image border), so their context is always a stripe.
    for _ in 0..count(&mut rng, 1, 3, area_units) {
        let size = rng.random_range(3..=4);
        let roof = ROOF_COLORS[rng.random_range(0..ROOF_COLORS.len())];
        let color = jitter(&mut rng, roof, 0.04);
        for _attempt in 0..50 {
            let (y, x) = (rng.random_range(0..=h - size), rng.random_range(0..=w - size));
            let (ys, xs) = (y.saturating_sub(1)..(y + size + 1).min(h), x.saturating_sub(1)..(x + size + 1).min(w));
            let on_stripe = ys.clone().all(|yy| xs.clone().all(|xx| cv.mask[yy * w + xx] == 2));
            if on_stripe {
                cv.rect(y, x, size, size, 4, color);
                break;
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut image = vec![0.0f32; 3 * h * w];
    for (i, px) in cv.rgb.iter().enumerate() {
        for (c, v) in px.iter().enumerate() {
            image[c * h * w + i] = (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    SegSample::new(Tensor::new(vec![3, h, w], image)?, cv.mask)
}
