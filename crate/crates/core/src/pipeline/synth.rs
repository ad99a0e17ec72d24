//! Synthetic textured covers for desk-scale experiments.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::ImageGray;
use crate::stego::image_rng;

/// Smallest and largest content amplitude. Variance scales with the square,
/// so a corpus spans roughly a 200x variance range.
pub const AMPLITUDE_RANGE: (f64, f64) = (4.0, 60.0);

/// Bilinearly interpolated Gaussian lattice with `cell`-pixel spacing.
fn value_noise(size: usize, cell: usize, rng: &mut impl Rng) -> Vec<f64> {
    let g = size / cell + 2;
    let lattice: Vec<f64> = (0..g * g).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx as usize, fx.fract());
            let at = |yy: usize, xx: usize| lattice[yy * g + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// One cover: a smooth field plus a finer texture band under a random mask,
/// and a few flat rectangles and discs that contribute hard edges.
pub fn synth_image(size: usize, amplitude: f64, rng: &mut impl Rng) -> Result<ImageGray> {
    let coarse = value_noise(size, (size / 4).max(2), rng);
    let fine = value_noise(size, 3, rng);
    let mask = value_noise(size, (size / 3).max(2), rng);
    let base = rng.random_range(70.0..180.0);
    let mut px: Vec<f64> = (0..size * size)
        .map(|i| {
            let m = (mask[i] * 1.5).clamp(0.0, 1.0);
            base + amplitude * (coarse[i] + 0.6 * m * fine[i])
        })
        .collect();
    for _ in 0..rng.random_range(1..=4) {
        let offset = amplitude * rng.random_range(1.0..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let r = rng.random_range(size as f64 / 10.0..size as f64 / 3.0);
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= r * 0.6
                };
                if inside {
                    px[y * size + x] += offset;
                }
            }
        }
    }
    ImageGray::new(
        size,
        size,
        px.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    )
}

/// `n` covers of `size`x`size`. Amplitudes climb geometrically with the
/// index so content variance always covers a wide range.
pub fn synth_corpus(n: usize, size: usize, seed: u64) -> Result<Vec<ImageGray>> {
    if n == 0 {
        return Err(Error::Dataset("corpus size must be at least 1".into()));
    }
    let (lo, hi) = AMPLITUDE_RANGE;
    (0..n)
        .map(|i| {
            let mut rng = image_rng(seed, i as u64);
            let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let jitter = rng.random_range(0.9..1.1);
            synth_image(size, lo * (hi / lo).powf(t) * jitter, &mut rng)
        })
        .collect()
}
