//! 8-bit grayscale images: storage, PGM/PNG I/O and bicubic resizing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageGray {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageGray {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(ImageGray {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut px = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                px.push(f(x, y));
            }
        }
        Self::new(width, height, px)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Population variance of the pixel values.
    pub fn variance(&self) -> f64 {
        let n = self.len() as f64;
        let mean = self.pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
        self.pixels
            .iter()
            .map(|&p| (p as f64 - mean).powi(2))
            .sum::<f64>()
            / n
    }

    /// Reads PGM (P2/P5) or PNG; colour PNGs are converted to luma.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let g = img.into_luma8();
        let (w, h) = (g.width() as usize, g.height() as usize);
        Self::new(w, h, g.into_raw()).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Writes binary PGM (P5) unless the extension is `.png`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let is_png = ImageFormat::from_path(path).ok() == Some(ImageFormat::Png);
        let res = if is_png {
            image::codecs::png::PngEncoder::new(&mut w).write_image(
                &self.pixels,
                self.width as u32,
                self.height as u32,
                ExtendedColorType::L8,
            )
        } else {
            PnmEncoder::new(&mut w)
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(
                    &self.pixels,
                    self.width as u32,
                    self.height as u32,
                    ExtendedColorType::L8,
                )
        };
        res.map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Rotates by 90 degrees counter-clockwise.
    pub fn rot90(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut px = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                // (x, y) -> (y, w - 1 - x) in an h-wide image
                px[(w - 1 - x) * h + y] = self.pixels[y * w + x];
            }
        }
        ImageGray {
            width: h,
            height: w,
            pixels: px,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut px = self.pixels.clone();
        px.chunks_mut(self.width).for_each(<[u8]>::reverse);
        ImageGray {
            pixels: px,
            ..*self
        }
    }

    pub fn flip_vertical(&self) -> Self {
        let px = self
            .pixels
            .chunks(self.width)
            .rev()
            .flatten()
            .copied()
            .collect();
        ImageGray {
            pixels: px,
            ..*self
        }
    }
}

/// Cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Per output sample: source indices and normalized weights. When
/// shrinking, the kernel is stretched by `1 / scale` (antialiasing);
/// out-of-range taps are mirrored back into the image.
fn contributions(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, width) = if scale < 1.0 {
        (scale, 4.0 / scale)
    } else {
        (1.0, 4.0)
    };
    let taps = width.ceil() as i64 + 2;
    let mirror = |i: i64| -> usize {
        let n = in_len as i64;
        let m = i.rem_euclid(2 * n);
        (if m < n { m } else { 2 * n - 1 - m }) as usize
    };
    (1..=out_len)
        .map(|i| {
            // 1-based centre, as in the usual formulation
            let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as i64;
            let raw: Vec<(i64, f64)> = (0..taps)
                .map(|j| {
                    let idx = left + j;
                    (idx, kscale * cubic(kscale * (u - idx as f64)))
                })
                .collect();
            let total: f64 = raw.iter().map(|&(_, w)| w).sum();
            raw.into_iter()
                .filter(|&(_, w)| w != 0.0)
                .map(|(idx, w)| (mirror(idx - 1), w / total))
                .collect()
        })
        .collect()
}

fn resize_axis(src: &[f64], w: usize, h: usize, out: usize, horizontal: bool) -> Vec<f64> {
    if horizontal {
        let weights = contributions(w, out);
        let mut dst = vec![0.0; out * h];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (x, taps) in weights.iter().enumerate() {
                dst[y * out + x] = taps.iter().map(|&(i, wt)| row[i] * wt).sum();
            }
        }
        dst
    } else {
        let weights = contributions(h, out);
        let mut dst = vec![0.0; w * out];
        for (y, taps) in weights.iter().enumerate() {
            for x in 0..w {
                dst[y * w + x] = taps.iter().map(|&(i, wt)| src[i * w + x] * wt).sum();
            }
        }
        dst
    }
}

/// Antialiased bicubic resize with symmetric boundary handling. Rows are
/// resized before columns; the result is rounded and clamped to 0..=255.
pub fn resize(img: &ImageGray, out_w: usize, out_h: usize) -> Result<ImageGray> {
    let src: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    let tmp = resize_axis(&src, img.width, img.height, out_h, false);
    let dst = resize_axis(&tmp, img.width, out_h, out_w, true);
    let px = dst
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    ImageGray::new(out_w, out_h, px)
}

/// Resizes a square image to `side x side`.
pub fn resize_square(img: &ImageGray, side: usize) -> Result<ImageGray> {
    if img.width != img.height {
        return Err(Error::InvalidImage(format!(
            "expected a square image, got {}x{}",
            img.width, img.height
        )));
    }
    resize(img, side, side)
}

pub fn resize_to_256(img: &ImageGray) -> Result<ImageGray> {
    resize_square(img, 256)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contribution_weights_are_normalized() {
        for (i, o) in [(512, 256), (64, 64), (100, 37), (16, 40)] {
            for taps in contributions(i, o) {
                let s: f64 = taps.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(taps.iter().all(|t| t.0 < i));
            }
        }
    }

    #[test]
    fn identity_size_is_identity() {
        let img = ImageGray::from_fn(20, 18, |x, y| ((x * 7 + y * 13) % 256) as u8).unwrap();
        assert_eq!(resize(&img, 20, 18).unwrap(), img);
    }

    #[test]
    fn dihedral_helpers() {
        let img = ImageGray::from_fn(16, 20, |x, y| (x + 16 * y) as u8).unwrap();
        let r = img.rot90();
        assert_eq!((r.width(), r.height()), (20, 16));
        assert_eq!(r.rot90().rot90().rot90(), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().get(0, 0), img.get(0, 19));
        // top-right corner moves to top-left under a ccw rotation
        assert_eq!(r.get(0, 0), img.get(15, 0));
    }
}
