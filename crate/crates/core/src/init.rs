//! Seeded weight initializers.

use mcnet_tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Uniform on `+-sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming,
    Gaussian { mean: f64, std: f64 },
}

/// `(fan_in, fan_out)` for `[out, in, ...receptive]` shapes.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [o, i, rest @ ..] => {
            let r: usize = rest.iter().product();
            (i * r, o * r)
        }
    }
}

pub fn random_init<T: Scalar>(shape: &[usize], kind: InitKind, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fan_in, fan_out) = fans(shape);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = match kind {
        InitKind::Xavier => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..numel).map(|_| rng.random_range(-a..a)).collect()
        }
        InitKind::Kaiming => {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..numel).map(|_| d.sample(&mut rng)).collect()
        }
        InitKind::Gaussian { mean, std } => {
            let d = Normal::new(mean, std).expect("finite std");
            (0..numel).map(|_| d.sample(&mut rng)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data.into_iter().map(T::from_f64_lossy).collect()).expect("shape")
}

/// Derives an independent seed for a named parameter, so adding or
/// reordering parameters does not shift anybody else's initialization.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
