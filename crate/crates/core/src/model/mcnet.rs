//! The multi-context classifier with its preprocessing stage, optional
//! self-attention and two-way softmax output.

use mcnet_tensor::nn::{same_padding, ActivationLayer, BatchNorm2d, Conv2d, Linear};
use mcnet_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use super::config::{ModelConfig, Preprocessing};
use super::denoiser::{self, Denoiser};
use crate::banks::{gabor_bank, kv_kernel, srm_bank, GaborParams, KERNEL_SIZE};
use crate::error::{Error, Result};
use crate::init::{param_seed, random_init, InitKind};

pub const POOL_WINDOW: usize = 3;
pub const POOL_STRIDE: usize = 2;
pub const POOL_PADDING: usize = 1;
pub const FC_INIT_STD: f64 = 0.01;
pub const STEGO_CLASS: usize = 1;

#[derive(Debug, Clone)]
enum Pre {
    Identity,
    /// Fixed `[K, 1, 5, 5]` bank stored as a buffer.
    Fixed(ParamId),
    Learned(Conv2d),
}

#[derive(Debug, Clone)]
struct Block {
    branches: Vec<Conv2d>,
    abs: bool,
    bn: BatchNorm2d,
    act: ActivationLayer,
    pools: usize,
}

#[derive(Debug, Clone)]
struct Head {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: ActivationLayer,
}

#[derive(Debug, Clone)]
struct Attention {
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    gamma: ParamId,
}

#[derive(Debug, Clone)]
struct Layers {
    pre: Pre,
    blocks: Vec<Block>,
    head: Head,
    attention: Option<Attention>,
    fc: Linear,
}

/// How batch norm layers run during a forward pass.
enum Access<'a, T> {
    Train { store: &'a mut ParamStore<T>, update: bool },
    Eval(&'a ParamStore<T>),
}

impl<T: Scalar> Access<'_, T> {
    fn store(&self) -> &ParamStore<T> {
        match self {
            Access::Train { store, .. } => store,
            Access::Eval(store) => store,
        }
    }

    fn bn(&mut self, bn: &BatchNorm2d, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(match self {
            Access::Train { store, update } => bn.forward_train(g, store, x, *update)?,
            Access::Eval(store) => bn.forward_eval(g, store, x)?,
        })
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[N, 2]` class probabilities.
    pub probs: Var,
    /// `[N]` stego-class probability.
    pub stego: Var,
    /// Output of every block, 1-based order.
    pub blocks: Vec<Var>,
    /// Attention matrix `[N, HW, HW]` when attention is enabled.
    pub attention: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct McNet<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    layers: Layers,
}

fn xavier_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    seed: u64,
) -> Result<Conv2d> {
    let w = random_init(
        &[out, inp, k, k],
        InitKind::Xavier,
        param_seed(seed, &format!("{name}.weight")),
    );
    Ok(Conv2d::new(store, name, w, Some(Tensor::zeros([out])), 1, same_padding(k))?)
}

impl<T: Scalar> McNet<T> {
    /// Builds a freshly initialized network; every parameter draws from
    /// its own stream derived from `seed` and its name.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let pre = match config.preprocessing {
            Preprocessing::None => Pre::Identity,
            Preprocessing::Kv => Pre::Fixed(store.add_buffer("pre.kernels", kv_kernel().to_tensor())?),
            Preprocessing::Srm => Pre::Fixed(store.add_buffer("pre.kernels", srm_bank()?.to_tensor())?),
            Preprocessing::Gabor => Pre::Fixed(
                store.add_buffer("pre.kernels", gabor_bank(&GaborParams::default()).to_tensor())?,
            ),
            Preprocessing::LearnedDn => Pre::Learned(denoiser::first_layer(&mut store, &config.denoiser(), seed)?),
        };
        let width = config.block_width();
        let mut blocks = Vec::with_capacity(config.depth - 1);
        let mut inp = config.input_channels();
        for b in 1..config.depth {
            let branches = config
                .kernel_set
                .iter()
                .map(|&k| {
                    xavier_conv(
                        &mut store,
                        &format!("block{b}.branch{k}x{k}"),
                        config.branch_width,
                        inp,
                        k,
                        seed,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let bn = BatchNorm2d::new(&mut store, &format!("block{b}.bn"), width)?;
            let act = ActivationLayer::new(
                &mut store,
                &format!("block{b}.act"),
                config.activation.for_block(b),
                width,
            )?;
            blocks.push(Block {
                branches,
                abs: config.abs_blocks.contains(&b),
                bn,
                act,
                pools: config.pools_after(b),
            });
            inp = width;
        }
        let d = config.depth;
        let hc = config.head_channels;
        let head = Head {
            conv: xavier_conv(&mut store, &format!("block{d}.conv"), hc, inp, 1, seed)?,
            bn: BatchNorm2d::new(&mut store, &format!("block{d}.bn"), hc)?,
            act: ActivationLayer::new(&mut store, &format!("block{d}.act"), config.activation.for_block(d), hc)?,
        };
        let attention = if config.attention {
            Some(Attention {
                query: xavier_conv(&mut store, "attention.query", hc / 8, hc, 1, seed)?,
                key: xavier_conv(&mut store, "attention.key", hc / 8, hc, 1, seed)?,
                value: xavier_conv(&mut store, "attention.value", hc, hc, 1, seed)?,
                gamma: store.add("attention.gamma", Tensor::zeros([1]))?,
            })
        } else {
            None
        };
        let fc_w = random_init(
            &[2, hc],
            InitKind::Gaussian {
                mean: 0.0,
                std: FC_INIT_STD,
            },
            param_seed(seed, "fc.weight"),
        );
        let fc = Linear::new(&mut store, "fc", fc_w, Tensor::zeros([2]))?;
        Ok(McNet {
            config,
            store,
            layers: Layers {
                pre,
                blocks,
                head,
                attention,
                fc,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> McNet<U> {
        McNet {
            config: self.config.clone(),
            store: self.store.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Concatenated channel count of every multi-context block.
    pub fn block_widths(&self) -> Vec<usize> {
        self.layers
            .blocks
            .iter()
            .map(|b| {
                b.branches
                    .iter()
                    .map(|c| self.store.get(c.weight).tensor.shape()[0])
                    .sum()
            })
            .collect()
    }

    /// Copies the first layer of a trained denoiser into the preprocessing
    /// stage.
    pub fn load_denoiser(&mut self, dn: &Denoiser<T>) -> Result<()> {
        if self.config.preprocessing != Preprocessing::LearnedDn {
            return Err(Error::Config("preprocessing is not learned_dn".into()));
        }
        let want = self.config.denoiser();
        let have = dn.config();
        if (want.filters, want.filter_size) != (have.filters, have.filter_size) {
            return Err(Error::ConfigMismatch(format!(
                "denoiser has {} filters of size {}, model expects {} of size {}",
                have.filters, have.filter_size, want.filters, want.filter_size
            )));
        }
        super::copy_params(dn.store(), &mut self.store, Some(denoiser::CONV1))?;
        Ok(())
    }

    /// Freezes or thaws the preprocessing denoiser layer; returns the
    /// number of affected tensors.
    pub fn freeze_denoiser(&mut self, frozen: bool) -> usize {
        self.store.set_frozen(&format!("{}.", denoiser::PREFIX), frozen)
    }

    /// Training-mode forward using batch statistics; running statistics
    /// are folded in when `update_stats` is set.
    pub fn forward_train(&mut self, g: &mut Graph<T>, images: Var, update_stats: bool) -> Result<Forward> {
        let McNet {
            config,
            store,
            layers,
        } = self;
        run(
            config,
            layers,
            Access::Train {
                store,
                update: update_stats,
            },
            g,
            images,
        )
    }

    /// Eval-mode forward on running statistics; needs no mutable access,
    /// so a network can serve several threads at once.
    pub fn forward_eval(&self, g: &mut Graph<T>, images: Var) -> Result<Forward> {
        run(&self.config, &self.layers, Access::Eval(&self.store), g, images)
    }
}

fn run<T: Scalar>(
    config: &ModelConfig,
    layers: &Layers,
    mut acc: Access<'_, T>,
    g: &mut Graph<T>,
    images: Var,
) -> Result<Forward> {
    let shape = g.shape(images).to_vec();
    let s = config.input_size;
    if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
        return Err(Error::Config(format!(
            "input {shape:?} does not match [N, 1, {s}, {s}]"
        )));
    }
    let mut x = match &layers.pre {
        Pre::Identity => images,
        Pre::Fixed(id) => {
            let w = g.constant(acc.store().get(*id).tensor.clone())?;
            g.conv2d(images, w, None, 1, KERNEL_SIZE / 2)?
        }
        Pre::Learned(conv) => conv.forward(g, acc.store(), images)?,
    };
    let mut outs = Vec::with_capacity(config.depth);
    for block in &layers.blocks {
        let parts = block
            .branches
            .iter()
            .map(|c| c.forward(g, acc.store(), x).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_channels(&parts)?
        };
        if block.abs {
            x = g.abs(x)?;
        }
        x = acc.bn(&block.bn, g, x)?;
        x = block.act.forward(g, acc.store(), x)?;
        for _ in 0..block.pools {
            x = g.avg_pool(x, POOL_WINDOW, POOL_STRIDE, POOL_PADDING)?;
        }
        outs.push(x);
    }
    let head = &layers.head;
    x = head.conv.forward(g, acc.store(), x)?;
    x = acc.bn(&head.bn, g, x)?;
    x = head.act.forward(g, acc.store(), x)?;
    outs.push(x);
    let mut attention = None;
    if let Some(att) = &layers.attention {
        let (y, a) = self_attention(g, acc.store(), att, x)?;
        x = y;
        attention = Some(a);
    }
    let pooled = g.global_avg_pool(x)?;
    let logits = layers.fc.forward(g, acc.store(), pooled)?;
    let probs = g.softmax(logits)?;
    let stego = g.select_column(probs, STEGO_CLASS)?;
    Ok(Forward {
        probs,
        stego,
        blocks: outs,
        attention,
    })
}

/// `x + gamma * (V A^T)` with `A = softmax(Q^T K)` over positions.
fn self_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    att: &Attention,
    x: Var,
) -> Result<(Var, Var)> {
    let (n, c, h, w) = g.value(x).dims4()?;
    let hw = h * w;
    let q = att.query.forward(g, store, x)?;
    let k = att.key.forward(g, store, x)?;
    let v = att.value.forward(g, store, x)?;
    let q = g.reshape(q, &[n, c / 8, hw])?;
    let k = g.reshape(k, &[n, c / 8, hw])?;
    let v = g.reshape(v, &[n, c, hw])?;
    let scores = g.batch_matmul(q, k, true, false)?;
    let a = g.softmax(scores)?;
    let o = g.batch_matmul(v, a, false, true)?;
    let o = g.reshape(o, &[n, c, h, w])?;
    let gamma = g.param(store, att.gamma)?;
    Ok((g.residual_gate(x, o, gamma)?, a))
}
