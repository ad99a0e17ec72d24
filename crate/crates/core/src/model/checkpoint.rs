//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                        |
//! |--------------|------------------------------------------------|
//! | 5            | magic `MCNT1`                                  |
//! | 4            | `u32` header length `H`                        |
//! | H            | UTF-8 JSON header                              |
//! | payload      | raw `f32` tensors at the header's offsets      |
//! | 4            | `u32` CRC32 of every preceding byte            |
//!
//! The header holds the model kind, the config it was built from, training
//! metadata, and one entry per stored tensor (name, role, dtype, shape,
//! byte offset into the payload). Roles are `weight`, `buffer`, and the
//! Adamax moments `adamax_m` / `adamax_u` stored under the parameter's
//! name; a weight entry also records its Adamax step counter.

use std::fs;
use std::path::Path;

use mcnet_tensor::nn::ParamKind;
use mcnet_tensor::{ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{DenoiserConfig, ModelConfig};
use super::{Denoiser, McNet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MCNT1";
pub const FORMAT_VERSION: u32 = 1;

/// Training position stored alongside the weights. Every random stream
/// in training is derived from `seed` and the epoch / batch position, so
/// these fields are the complete RNG state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainMeta {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub lr: f64,
    pub val_loss: Option<f64>,
    pub val_pe: Option<f64>,
    pub best_epoch: Option<usize>,
    /// First-epoch training loss, the reference for divergence checks.
    pub initial_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Weight,
    Buffer,
    AdamaxM,
    AdamaxU,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adamax_t: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    config: Value,
    meta: TrainMeta,
    tensors: Vec<Entry>,
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: TrainMeta,
    pub store: ParamStore<f32>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut put = |entries: &mut Vec<Entry>, name: &str, role, shape: &[usize], data: &[f32], frozen, t| {
            entries.push(Entry {
                name: name.to_string(),
                role,
                dtype: "f32".into(),
                shape: shape.to_vec(),
                offset: payload.len() as u64,
                frozen,
                adamax_t: t,
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in self.store.iter() {
            let shape = p.tensor.shape();
            match p.kind {
                ParamKind::Buffer => put(&mut entries, &p.name, Role::Buffer, shape, p.tensor.data(), false, None),
                ParamKind::Weight => {
                    put(
                        &mut entries,
                        &p.name,
                        Role::Weight,
                        shape,
                        p.tensor.data(),
                        p.frozen,
                        Some(p.state.t),
                    );
                    put(&mut entries, &p.name, Role::AdamaxM, shape, &p.state.m, false, None);
                    put(&mut entries, &p.name, Role::AdamaxU, shape, &p.state.u, false, None);
                }
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(bad("file is truncated"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic; not a checkpoint or an unsupported version"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(format!(
                "CRC mismatch (stored {stored:08x}, computed {actual:08x}); file is truncated or corrupted"
            )));
        }
        let hlen = u32::from_le_bytes(body[5..9].try_into().unwrap()) as usize;
        let hend = 9usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[9..hend]).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let payload = &body[hend..];
        let read = |e: &Entry| -> Result<Vec<f32>> {
            if e.dtype != "f32" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| bad(format!("{}: data out of range", e.name)))?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut store = ParamStore::new();
        for e in &header.tensors {
            let data = read(e)?;
            match e.role {
                Role::Weight => {
                    let id = store.add(&e.name, Tensor::new(e.shape.clone(), data)?)?;
                    let p = store.get_mut(id);
                    p.frozen = e.frozen;
                    p.state.t = e.adamax_t.unwrap_or(0);
                }
                Role::Buffer => {
                    store.add_buffer(&e.name, Tensor::new(e.shape.clone(), data)?)?;
                }
                Role::AdamaxM | Role::AdamaxU => {
                    let id = store
                        .id(&e.name)
                        .ok_or_else(|| bad(format!("{}: optimizer state before its weight", e.name)))?;
                    let p = store.get_mut(id);
                    if p.tensor.shape() != e.shape.as_slice() {
                        return Err(bad(format!("{}: optimizer state shape mismatch", e.name)));
                    }
                    if e.role == Role::AdamaxM {
                        p.state.m = data;
                    } else {
                        p.state.u = data;
                    }
                }
            }
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            store,
        })
    }

    /// Writes through a temporary sibling and renames, so a crash never
    /// leaves a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Decoded config of the expected type.
    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| bad(format!("config: {e}")))
    }
}

/// Lists the top-level fields that differ between two serialized configs.
fn config_diff(file: &Value, want: &Value) -> Vec<String> {
    let (Some(a), Some(b)) = (file.as_object(), want.as_object()) else {
        return vec![format!("file {file} vs expected {want}")];
    };
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| {
            let show = |v: Option<&Value>| v.map_or("<absent>".to_string(), Value::to_string);
            format!("{k}: file {} vs expected {}", show(a.get(k)), show(b.get(k)))
        })
        .collect()
}

/// A network that can be written to and restored from a checkpoint.
pub trait Checkpointable: Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned + Clone;

    fn config(&self) -> &Self::Config;
    fn store(&self) -> &ParamStore<f32>;
    fn store_mut(&mut self) -> &mut ParamStore<f32>;
    fn build(config: Self::Config, seed: u64) -> Result<Self>;

    fn to_checkpoint(&self, meta: TrainMeta) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: Self::KIND.into(),
            config: serde_json::to_value(self.config()).map_err(|e| bad(e.to_string()))?,
            meta,
            store: self.store().clone(),
        })
    }

    fn save(&self, path: &Path, meta: TrainMeta) -> Result<()> {
        self.to_checkpoint(meta)?.save(path)
    }

    /// Rebuilds the network from the config echoed in the checkpoint,
    /// restoring weights, buffers and optimizer state.
    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != Self::KIND {
            return Err(bad(format!("holds a {} model, not a {}", ck.kind, Self::KIND)));
        }
        let mut net = Self::build(ck.config_as()?, ck.meta.seed)?;
        restore(&ck.store, net.store_mut(), true)?;
        Ok(net)
    }

    /// Like [`Checkpointable::from_checkpoint`] but first insists that the
    /// stored config equals `expected`.
    fn from_checkpoint_checked(ck: &Checkpoint, expected: &Self::Config) -> Result<Self> {
        let want = serde_json::to_value(expected).map_err(|e| bad(e.to_string()))?;
        let diff = config_diff(&ck.config, &want);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff.join("; ")));
        }
        Self::from_checkpoint(ck)
    }

    fn load(path: &Path, expected: &Self::Config) -> Result<(Self, TrainMeta)> {
        let ck = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint_checked(&ck, expected)?, ck.meta))
    }

    fn open(path: &Path) -> Result<(Self, TrainMeta)> {
        let ck = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ck)?, ck.meta))
    }

    /// Copies every parameter and buffer from a checkpoint with the same
    /// architecture, with fresh optimizer state and the epoch counter reset.
    fn transfer(ck: &Checkpoint, expected: &Self::Config) -> Result<(Self, TrainMeta)> {
        let mut net = Self::from_checkpoint_checked(ck, expected)?;
        net.store_mut().reset_optimizer();
        let meta = TrainMeta {
            seed: ck.meta.seed,
            ..TrainMeta::default()
        };
        Ok((net, meta))
    }
}

/// Copies values (and optionally optimizer state) for every parameter of
/// `dst`, which must all be present in `src` with identical shapes.
fn restore(src: &ParamStore<f32>, dst: &mut ParamStore<f32>, optimizer: bool) -> Result<()> {
    if src.len() != dst.len() {
        return Err(bad(format!(
            "{} stored tensors where the model has {}",
            src.len(),
            dst.len()
        )));
    }
    super::copy_params(src, dst, None)?;
    if optimizer {
        for p in dst.iter_mut() {
            let s = src.by_name(&p.name).expect("checked by copy_params");
            p.state = s.state.clone();
            p.frozen = s.frozen;
        }
    }
    Ok(())
}

impl Checkpointable for McNet<f32> {
    const KIND: &'static str = "mcnet";
    type Config = ModelConfig;

    fn config(&self) -> &ModelConfig {
        McNet::config(self)
    }
    fn store(&self) -> &ParamStore<f32> {
        McNet::store(self)
    }
    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        McNet::store_mut(self)
    }
    fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        McNet::new(config, seed)
    }
}

impl Checkpointable for Denoiser<f32> {
    const KIND: &'static str = "denoiser";
    type Config = DenoiserConfig;

    fn config(&self) -> &DenoiserConfig {
        Denoiser::config(self)
    }
    fn store(&self) -> &ParamStore<f32> {
        Denoiser::store(self)
    }
    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        Denoiser::store_mut(self)
    }
    fn build(config: DenoiserConfig, seed: u64) -> Result<Self> {
        Denoiser::new(config, seed)
    }
}
