//! Content-adaptive ternary embedding simulation.
//!
//! Costs come from a pluggable [`CostModel`]; change probabilities follow
//! the Gibbs form `beta = exp(-lambda rho) / Z` with `lambda` tuned so the
//! ternary entropy matches the requested payload.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageGray;

pub const LAMBDA_MIN: f64 = 1e-6;
pub const LAMBDA_MAX: f64 = 1e4;
pub const MAX_BISECTIONS: usize = 200;
pub const PAYLOAD_TOLERANCE: f64 = 1e-6;

/// Per-pixel costs of a +1 and a -1 change. `f64::INFINITY` marks a wet
/// (forbidden) direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    pub width: usize,
    pub height: usize,
    pub rho_plus: Vec<f64>,
    pub rho_minus: Vec<f64>,
}

impl CostMap {
    pub fn len(&self) -> usize {
        self.rho_plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho_plus.is_empty()
    }

    /// Same cost in both directions everywhere.
    pub fn uniform(width: usize, height: usize, rho: f64) -> Self {
        CostMap {
            width,
            height,
            rho_plus: vec![rho; width * height],
            rho_minus: vec![rho; width * height],
        }
    }

    /// Largest achievable payload in bits per pixel: log2(3) for free
    /// pixels, 1 bit with one wet direction, 0 when fully wet.
    pub fn capacity_bpp(&self) -> f64 {
        let bits: f64 = self
            .rho_plus
            .iter()
            .zip(&self.rho_minus)
            .map(|(p, m)| match (p.is_finite(), m.is_finite()) {
                (true, true) => 3f64.log2(),
                (false, false) => 0.0,
                _ => 1.0,
            })
            .sum();
        bits / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeProbMap {
    pub beta_plus: Vec<f64>,
    pub beta_minus: Vec<f64>,
}

impl ChangeProbMap {
    pub fn zeros(len: usize) -> Self {
        ChangeProbMap {
            beta_plus: vec![0.0; len],
            beta_minus: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.beta_plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta_plus.is_empty()
    }

    /// Gibbs probabilities for a given `lambda`.
    pub fn from_costs(cost: &CostMap, lambda: f64) -> Self {
        let (beta_plus, beta_minus) = cost
            .rho_plus
            .iter()
            .zip(&cost.rho_minus)
            .map(|(&rp, &rm)| {
                let ep = (-lambda * rp).exp();
                let em = (-lambda * rm).exp();
                let z = 1.0 + ep + em;
                (ep / z, em / z)
            })
            .unzip();
        ChangeProbMap {
            beta_plus,
            beta_minus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta_plus.len() != self.beta_minus.len() {
            return Err(Error::Probabilities("length mismatch".into()));
        }
        for (i, (&p, &m)) in self.beta_plus.iter().zip(&self.beta_minus).enumerate() {
            if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&m) || p + m > 1.0 + 1e-12 {
                return Err(Error::Probabilities(format!("pixel {i}: ({p}, {m})")));
            }
        }
        Ok(())
    }
}

/// `-b log2 b` with `0 log 0 = 0`.
fn h(b: f64) -> f64 {
    if b > 0.0 {
        -b * b.log2()
    } else {
        0.0
    }
}

/// Total ternary entropy in bits, compensated summation.
pub fn ternary_entropy(beta: &ChangeProbMap) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (&p, &m) in beta.beta_plus.iter().zip(&beta.beta_minus) {
        let term = h(p) + h(m) + h(1.0 - p - m);
        let t = sum + term;
        comp += if sum.abs() >= term.abs() {
            (sum - t) + term
        } else {
            (term - t) + sum
        };
        sum = t;
    }
    sum + comp
}

fn entropy_bpp(cost: &CostMap, lambda: f64) -> f64 {
    ternary_entropy(&ChangeProbMap::from_costs(cost, lambda)) / cost.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSolution {
    pub lambda: f64,
    pub beta: ChangeProbMap,
    pub entropy_bpp: f64,
    pub iterations: usize,
}

/// Finds `lambda` such that the ternary entropy per pixel equals
/// `payload_bpp`. Entropy decreases monotonically in `lambda`, so the root
/// is bracketed by geometric expansion from 1 and then bisected.
pub fn solve_lambda(cost: &CostMap, payload_bpp: f64) -> Result<LambdaSolution> {
    if cost.is_empty() {
        return Err(Error::Solver("empty cost map".into()));
    }
    if !(payload_bpp >= 0.0) {
        return Err(Error::InfeasiblePayload {
            payload: payload_bpp,
            capacity: cost.capacity_bpp(),
        });
    }
    if payload_bpp == 0.0 {
        return Ok(LambdaSolution {
            lambda: LAMBDA_MAX,
            beta: ChangeProbMap::zeros(cost.len()),
            entropy_bpp: 0.0,
            iterations: 0,
        });
    }
    if payload_bpp > entropy_bpp(cost, LAMBDA_MIN) {
        return Err(Error::InfeasiblePayload {
            payload: payload_bpp,
            capacity: cost.capacity_bpp(),
        });
    }
    let (mut lo, mut hi) = (1.0, 1.0);
    if entropy_bpp(cost, 1.0) > payload_bpp {
        while entropy_bpp(cost, hi) > payload_bpp {
            lo = hi;
            hi *= 2.0;
            if hi > LAMBDA_MAX {
                return Err(Error::Solver(format!(
                    "payload {payload_bpp} needs lambda above the {LAMBDA_MAX} cap"
                )));
            }
        }
    } else {
        while entropy_bpp(cost, lo) < payload_bpp {
            hi = lo;
            lo = (lo / 2.0).max(LAMBDA_MIN);
            if lo == LAMBDA_MIN {
                break;
            }
        }
    }
    // entropy(lo) >= payload >= entropy(hi)
    for it in 1..=MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || (hi - lo) <= 1e-15 * hi {
            return finish(cost, payload_bpp, 0.5 * (lo + hi), it);
        }
        if entropy_bpp(cost, mid) > payload_bpp {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Solver(format!(
        "no convergence after {MAX_BISECTIONS} bisections (bracket [{lo}, {hi}])"
    )))
}

fn finish(cost: &CostMap, payload: f64, lambda: f64, iterations: usize) -> Result<LambdaSolution> {
    let beta = ChangeProbMap::from_costs(cost, lambda);
    let achieved = ternary_entropy(&beta) / cost.len() as f64;
    if (achieved - payload).abs() > PAYLOAD_TOLERANCE {
        return Err(Error::Solver(format!(
            "converged to lambda {lambda} with {achieved} bpp, wanted {payload}"
        )));
    }
    Ok(LambdaSolution {
        lambda,
        beta,
        entropy_bpp: achieved,
        iterations,
    })
}

/// RNG for image `index` of a run seeded with `seed`. Each image gets its
/// own ChaCha stream, so parallel and serial processing agree.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples one ternary change per pixel: +1 with probability `beta_plus`,
/// -1 with `beta_minus`. Any probability mass that could leave 0..=255 is
/// rejected up front.
pub fn simulate_embedding(cover: &ImageGray, beta: &ChangeProbMap, rng: &mut impl Rng) -> Result<ImageGray> {
    if beta.len() != cover.len() {
        return Err(Error::Probabilities(format!(
            "{} probabilities for {} pixels",
            beta.len(),
            cover.len()
        )));
    }
    beta.validate()?;
    for (i, &p) in cover.pixels().iter().enumerate() {
        if (p == 255 && beta.beta_plus[i] > 0.0) || (p == 0 && beta.beta_minus[i] > 0.0) {
            return Err(Error::Probabilities(format!(
                "pixel {i} = {p} would leave the 0..=255 range"
            )));
        }
    }
    let px = cover
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let u: f64 = rng.random();
            if u < beta.beta_plus[i] {
                p + 1
            } else if u < beta.beta_plus[i] + beta.beta_minus[i] {
                p - 1
            } else {
                p
            }
        })
        .collect();
    ImageGray::new(cover.width(), cover.height(), px)
}

/// Maps an image to embedding costs.
pub trait CostModel: Send + Sync {
    fn name(&self) -> &str;
    fn cost(&self, image: &ImageGray) -> Result<CostMap>;
}

/// `rho = 1 / (local variance + 1)` over a square window with mirrored
/// borders. Pixels at 0 cannot go down and pixels at 255 cannot go up.
#[derive(Debug, Clone, Copy)]
pub struct InverseVariance {
    pub window: usize,
}

impl Default for InverseVariance {
    fn default() -> Self {
        InverseVariance { window: 3 }
    }
}

impl CostModel for InverseVariance {
    fn name(&self) -> &str {
        "inverse_variance"
    }

    fn cost(&self, image: &ImageGray) -> Result<CostMap> {
        inverse_variance_cost(image, self.window)
    }
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

pub fn inverse_variance_cost(image: &ImageGray, window: usize) -> Result<CostMap> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Other(format!("cost window must be odd, got {window}")));
    }
    let (w, hgt) = (image.width(), image.height());
    let r = (window / 2) as isize;
    let n = (window * window) as f64;
    let mut rho = Vec::with_capacity(w * hgt);
    for y in 0..hgt {
        for x in 0..w {
            let (mut s, mut s2) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = image.get(mirror(x as isize + dx, w), mirror(y as isize + dy, hgt)) as f64;
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0);
            rho.push(1.0 / (var + 1.0));
        }
    }
    let mut rho_plus = rho.clone();
    let mut rho_minus = rho;
    for (i, &p) in image.pixels().iter().enumerate() {
        if p == 255 {
            rho_plus[i] = f64::INFINITY;
        }
        if p == 0 {
            rho_minus[i] = f64::INFINITY;
        }
    }
    Ok(CostMap {
        width: w,
        height: hgt,
        rho_plus,
        rho_minus,
    })
}

/// Named placeholder for cost functions defined in external literature.
struct Unavailable(&'static str);

impl CostModel for Unavailable {
    fn name(&self) -> &str {
        self.0
    }

    fn cost(&self, _: &ImageGray) -> Result<CostMap> {
        Err(Error::CostModelUnavailable(self.0.to_string()))
    }
}

/// Cost models by name. The default registry ships `inverse_variance` and
/// reserves `wow`, `s_uniward`, `hill` and `mipod` for user implementations.
#[derive(Clone)]
pub struct CostRegistry {
    models: BTreeMap<String, Arc<dyn CostModel>>,
}

impl Default for CostRegistry {
    fn default() -> Self {
        let mut r = CostRegistry {
            models: BTreeMap::new(),
        };
        r.register(Arc::new(InverseVariance::default()));
        for name in ["wow", "s_uniward", "hill", "mipod"] {
            r.register(Arc::new(Unavailable(name)));
        }
        r
    }
}

impl CostRegistry {
    pub fn register(&mut self, model: Arc<dyn CostModel>) {
        self.models.insert(model.name().to_string(), model);
    }

    pub fn names(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn CostModel>> {
        self.models
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownCostModel {
                name: name.to_string(),
                registered: self.names(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub stego: ImageGray,
    /// `stego - cover`, each entry in {-1, 0, 1}.
    pub noise: Vec<i8>,
    pub lambda: f64,
    pub entropy_bpp: f64,
}

/// cost -> lambda -> sampled changes, for one image.
pub fn embed(
    registry: &CostRegistry,
    cover: &ImageGray,
    model: &str,
    payload_bpp: f64,
    rng: &mut impl Rng,
) -> Result<Embedding> {
    let cost = registry.get(model)?.cost(cover)?;
    let sol = solve_lambda(&cost, payload_bpp)?;
    let stego = simulate_embedding(cover, &sol.beta, rng)?;
    let noise = stego
        .pixels()
        .iter()
        .zip(cover.pixels())
        .map(|(&s, &c)| (s as i16 - c as i16) as i8)
        .collect();
    Ok(Embedding {
        stego,
        noise,
        lambda: sol.lambda,
        entropy_bpp: sol.entropy_bpp,
    })
}

/// Noise map as an image: -1 black, 0 mid-gray, +1 white.
pub fn noise_image(width: usize, height: usize, noise: &[i8]) -> Result<ImageGray> {
    let px = noise
        .iter()
        .map(|&n| match n.signum() {
            -1 => 0,
            0 => 128,
            _ => 255,
        })
        .collect();
    ImageGray::new(width, height, px)
}

/// Noise map as whitespace-separated signed integers, one row per line.
pub fn noise_text(width: usize, noise: &[i8]) -> String {
    let mut s = String::with_capacity(noise.len() * 3);
    for row in noise.chunks(width) {
        let row: Vec<String> = row.iter().map(i8::to_string).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}
