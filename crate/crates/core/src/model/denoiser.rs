//! The two-layer denoiser: a bank of first-layer filters whose responses
//! are the features handed to the classifier, then one 5x5 filter mapping
//! them to a residual estimate.

use mcnet_tensor::nn::{same_padding, Conv2d};
use mcnet_tensor::{Graph, ParamStore, Scalar, Tensor, Var};

use super::config::{DenoiserConfig, DnInit};
use crate::banks::{gabor_bank, srm_bank, GaborParams};
use crate::error::Result;
use crate::init::{param_seed, random_init, InitKind};

pub const PREFIX: &str = "dn";
pub const CONV1: &str = "dn.conv1";
pub const CONV2: &str = "dn.conv2";
pub const OUTPUT_KERNEL: usize = 5;

/// Registers the first denoiser layer under [`CONV1`].
pub(crate) fn first_layer<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &DenoiserConfig,
    seed: u64,
) -> Result<Conv2d> {
    cfg.validate()?;
    let (f, k) = (cfg.filters, cfg.filter_size);
    let name = format!("{CONV1}.weight");
    let weight = match cfg.resolved_init() {
        DnInit::Srm => srm_bank()?.to_tensor(),
        DnInit::Gabor => gabor_bank(&GaborParams::default()).to_tensor(),
        _ => random_init(&[f, 1, k, k], InitKind::Kaiming, param_seed(seed, &name)),
    };
    Ok(Conv2d::new(
        store,
        CONV1,
        weight,
        Some(Tensor::zeros([f])),
        1,
        same_padding(k),
    )?)
}

#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    store: ParamStore<T>,
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Both denoiser outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserOutput {
    /// `[N, filters, H, W]` first-layer responses.
    pub features: Var,
    /// `[N, 1, H, W]` residual estimate.
    pub residual: Var,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let conv1 = first_layer(&mut store, &config, seed)?;
        let name = format!("{CONV2}.weight");
        let w2 = random_init(
            &[1, config.filters, OUTPUT_KERNEL, OUTPUT_KERNEL],
            InitKind::Xavier,
            param_seed(seed, &name),
        );
        let conv2 = Conv2d::new(
            &mut store,
            CONV2,
            w2,
            Some(Tensor::zeros([1])),
            1,
            same_padding(OUTPUT_KERNEL),
        )?;
        Ok(Denoiser {
            config,
            store,
            conv1,
            conv2,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Scalars per layer: `(conv1, conv2)`.
    pub fn parameter_counts(&self) -> (usize, usize) {
        let count = |c: &Conv2d| {
            self.store.get(c.weight).tensor.numel()
                + c.bias.map_or(0, |b| self.store.get(b).tensor.numel())
        };
        (count(&self.conv1), count(&self.conv2))
    }

    pub fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<DenoiserOutput> {
        let features = self.conv1.forward(g, &self.store, images)?;
        let residual = self.conv2.forward(g, &self.store, features)?;
        Ok(DenoiserOutput { features, residual })
    }

    /// First-layer responses only.
    pub fn features(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        Ok(self.conv1.forward(g, &self.store, images)?)
    }
}
