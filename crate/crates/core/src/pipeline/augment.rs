//! Random 90-degree rotations and mirror flips applied identically to both
//! images of a pair.

use rand::Rng;

use super::dataset::Pair;
use crate::image::ImageGray;
use crate::stego::image_rng;

pub const DEFAULT_PROBABILITY: f64 = 0.4;

/// Which of the three transforms fired. Applied as horizontal flip, then
/// vertical flip, then rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Transform {
    /// Each flag is set independently with probability `p`.
    pub fn draw(p: f64, rng: &mut impl Rng) -> Self {
        let p = p.clamp(0.0, 1.0);
        Transform {
            hflip: rng.random_bool(p),
            vflip: rng.random_bool(p),
            rot90: rng.random_bool(p),
        }
    }

    pub fn apply(&self, img: &ImageGray) -> ImageGray {
        let mut out = img.clone();
        if self.hflip {
            out = out.flip_horizontal();
        }
        if self.vflip {
            out = out.flip_vertical();
        }
        if self.rot90 {
            out = out.rot90();
        }
        out
    }

    pub fn dihedral(&self) -> Dihedral {
        let mut d = Dihedral::IDENTITY;
        if self.hflip {
            d = Dihedral::MIRROR.compose(d);
        }
        if self.vflip {
            d = Dihedral { rotation: 2, mirror: true }.compose(d);
        }
        if self.rot90 {
            d = Dihedral::ROT90.compose(d);
        }
        d
    }
}

/// An element of the symmetry group of the square: an optional left-right
/// mirror followed by `rotation` counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rotation: u8,
    pub mirror: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rotation: 0, mirror: false };
    pub const ROT90: Dihedral = Dihedral { rotation: 1, mirror: false };
    pub const MIRROR: Dihedral = Dihedral { rotation: 0, mirror: true };

    /// All eight elements.
    pub fn elements() -> impl Iterator<Item = Dihedral> {
        (0..8).map(|i| Dihedral {
            rotation: i % 4,
            mirror: i >= 4,
        })
    }

    /// `self` after `other`.
    pub fn compose(self, other: Dihedral) -> Dihedral {
        let r = if self.mirror {
            self.rotation + 4 - other.rotation
        } else {
            self.rotation + other.rotation
        };
        Dihedral {
            rotation: r % 4,
            mirror: self.mirror ^ other.mirror,
        }
    }

    pub fn apply(&self, img: &ImageGray) -> ImageGray {
        let mut out = if self.mirror { img.flip_horizontal() } else { img.clone() };
        for _ in 0..self.rotation {
            out = out.rot90();
        }
        out
    }
}

/// Draws one transform per pair and applies it to cover and stego alike.
pub fn augment(batch: &[Pair], p: f64, rng: &mut impl Rng) -> Vec<Pair> {
    batch
        .iter()
        .map(|pair| {
            let t = Transform::draw(p, rng);
            Pair {
                cover: t.apply(&pair.cover),
                stego: t.apply(&pair.stego),
            }
        })
        .collect()
}

/// The augmentation stream for one batch, independent of every other
/// random draw in a run.
pub fn batch_rng(seed: u64, epoch: usize, batch: usize) -> impl Rng {
    image_rng(seed ^ 0x6175_676d_656e_7400, ((epoch as u64) << 32) | batch as u64)
}
