use mcnet_tensor::Activation;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocessing {
    None,
    Kv,
    Srm,
    Gabor,
    #[default]
    LearnedDn,
}

/// First-layer initialization of the denoiser.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DnInit {
    /// SRM for 30 filters of size 5, Kaiming otherwise.
    #[default]
    Auto,
    Srm,
    Kaiming,
    Gabor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Relu,
    Lrelu,
    #[default]
    Prelu,
    /// TanH in blocks 1 and 2, ReLU afterwards.
    TanhThenRelu,
}

impl ActivationKind {
    /// Activation used by 1-based `block`.
    pub fn for_block(self, block: usize) -> Activation {
        match self {
            ActivationKind::Sigmoid => Activation::Sigmoid,
            ActivationKind::Tanh => Activation::Tanh,
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Lrelu => Activation::leaky(),
            ActivationKind::Prelu => Activation::PRelu,
            ActivationKind::TanhThenRelu if block <= 2 => Activation::Tanh,
            ActivationKind::TanhThenRelu => Activation::Relu,
        }
    }
}

pub const DN_FILTER_COUNTS: [usize; 4] = [16, 30, 32, 64];
pub const DN_FILTER_SIZES: [usize; 2] = [3, 5];
pub const MIN_DEPTH: usize = 2;
pub const MAX_DEPTH: usize = 8;
/// Blocks followed by a 3x3 / stride 2 average pool in the full-depth net.
pub const POOLED_BLOCKS: [usize; 4] = [2, 3, 4, 5];

/// Architecture of the denoiser subnetwork.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub filters: usize,
    pub filter_size: usize,
    pub init: DnInit,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            filters: 30,
            filter_size: 5,
            init: DnInit::Auto,
        }
    }
}

impl DenoiserConfig {
    /// `init` with `Auto` resolved.
    pub fn resolved_init(&self) -> DnInit {
        match self.init {
            DnInit::Auto if self.filters == 30 && self.filter_size == 5 => DnInit::Srm,
            DnInit::Auto => DnInit::Kaiming,
            other => other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !DN_FILTER_COUNTS.contains(&self.filters) {
            return Err(Error::Config(format!(
                "dn_filters must be one of {DN_FILTER_COUNTS:?}, got {}",
                self.filters
            )));
        }
        if !DN_FILTER_SIZES.contains(&self.filter_size) {
            return Err(Error::Config(format!(
                "dn_filter_size must be one of {DN_FILTER_SIZES:?}, got {}",
                self.filter_size
            )));
        }
        if matches!(self.init, DnInit::Srm | DnInit::Gabor) && (self.filters != 30 || self.filter_size != 5) {
            return Err(Error::Config(format!(
                "{:?} initialization needs 30 filters of size 5, got {} of size {}",
                self.init, self.filters, self.filter_size
            )));
        }
        Ok(())
    }
}

/// One M-CNet variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preprocessing: Preprocessing,
    pub dn_filters: usize,
    pub dn_filter_size: usize,
    pub dn_init: DnInit,
    /// Multi-context blocks plus the 1x1 head block.
    pub depth: usize,
    pub kernel_set: Vec<usize>,
    pub branch_width: usize,
    pub head_channels: usize,
    pub activation: ActivationKind,
    pub attention: bool,
    /// 1-based blocks that take the absolute value of their concatenation.
    pub abs_blocks: Vec<usize>,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preprocessing: Preprocessing::LearnedDn,
            dn_filters: 30,
            dn_filter_size: 5,
            dn_init: DnInit::Auto,
            depth: 6,
            kernel_set: vec![1, 3, 5],
            branch_width: 32,
            head_channels: 256,
            activation: ActivationKind::Prelu,
            attention: true,
            abs_blocks: vec![1],
            input_size: 256,
        }
    }
}

impl ModelConfig {
    /// 64x64 inputs and 8 channels per branch.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 64,
            branch_width: 8,
            ..Self::default()
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            filters: self.dn_filters,
            filter_size: self.dn_filter_size,
            init: self.dn_init,
        }
    }

    /// Channels after each multi-context block's concatenation.
    pub fn block_width(&self) -> usize {
        self.kernel_set.len() * self.branch_width
    }

    /// Channels entering block 1.
    pub fn input_channels(&self) -> usize {
        match self.preprocessing {
            Preprocessing::None | Preprocessing::Kv => 1,
            Preprocessing::Srm | Preprocessing::Gabor => 30,
            Preprocessing::LearnedDn => self.dn_filters,
        }
    }

    /// Pools applied after 1-based multi-context `block`. Blocks 2-5 pool
    /// once each; a shallower net applies the missing pools after its last
    /// multi-context block so the head always sees the same resolution.
    pub fn pools_after(&self, block: usize) -> usize {
        let last = self.depth - 1;
        if block > last {
            return 0;
        }
        let own = usize::from(POOLED_BLOCKS.contains(&block));
        if block == last {
            let before = POOLED_BLOCKS.iter().filter(|&&b| b < last).count();
            POOLED_BLOCKS.len() - before
        } else {
            own
        }
    }

    /// Spatial side after every block, 1-based blocks in order.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut s = self.input_size;
        let mut out = Vec::with_capacity(self.depth);
        for b in 1..self.depth {
            for _ in 0..self.pools_after(b) {
                s = pooled_size(s);
            }
            out.push(s);
        }
        out.push(s);
        out
    }

    pub fn head_size(&self) -> usize {
        *self.spatial_sizes().last().expect("depth >= 2")
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_DEPTH..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::Config(format!(
                "depth must be in {MIN_DEPTH}..={MAX_DEPTH}, got {}",
                self.depth
            )));
        }
        if self.kernel_set.is_empty() {
            return Err(Error::Config("kernel_set is empty".into()));
        }
        for (i, &k) in self.kernel_set.iter().enumerate() {
            if ![1, 3, 5].contains(&k) {
                return Err(Error::Config(format!("kernel_set entry {k} is not 1, 3 or 5")));
            }
            if self.kernel_set[..i].contains(&k) {
                return Err(Error::Config(format!("kernel_set repeats {k}")));
            }
        }
        if self.branch_width == 0 {
            return Err(Error::Config("branch_width must be positive".into()));
        }
        if self.head_channels < self.branch_width {
            return Err(Error::Config(format!(
                "head_channels {} is below branch_width {}",
                self.head_channels, self.branch_width
            )));
        }
        if let Some(b) = self.abs_blocks.iter().find(|&&b| b == 0 || b >= self.depth) {
            return Err(Error::Config(format!(
                "abs_blocks entry {b} is not a multi-context block (1..={})",
                self.depth - 1
            )));
        }
        if self.input_size < crate::image::MIN_SIDE {
            return Err(Error::Config(format!(
                "input_size {} is below {}",
                self.input_size,
                crate::image::MIN_SIDE
            )));
        }
        if self.preprocessing == Preprocessing::LearnedDn {
            self.denoiser().validate()?;
        }
        if self.attention {
            if self.head_channels % 8 != 0 {
                return Err(Error::Config(format!(
                    "attention needs head_channels divisible by 8, got {}",
                    self.head_channels
                )));
            }
            let s = self.head_size();
            if s < 2 {
                return Err(Error::Config(format!(
                    "attention at spatial size {s}; input_size {} is too small",
                    self.input_size
                )));
            }
        }
        Ok(())
    }
}

/// Side after a 3x3 / stride 2 / pad 1 pool.
pub fn pooled_size(s: usize) -> usize {
    (s - 1) / 2 + 1
}
