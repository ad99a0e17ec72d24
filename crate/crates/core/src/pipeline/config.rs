//! Run configuration files.
//!
//! A TOML document with optional `[model]`, `[denoiser]`, `[train]`,
//! `[finetune]` and `[data]` tables. Keys left out take the value of the
//! selected profile:
//!
//! ```toml
//! profile = "desk"      # or "paper"
//! seed = 1
//!
//! [model]
//! depth = 6
//! kernel_set = [1, 3, 5]
//!
//! [train]
//! epochs = 40
//! pairs_per_batch = 8
//! lr = { initial = 1e-3, factor = 0.1, period = 40 }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::schedule::TrainSchedule;
use super::train::DnTarget;
use crate::error::{Error, Result};
use crate::metrics::WaucOrientation;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 64x64 inputs, 8 channels per branch, short schedules.
    #[default]
    Desk,
    /// 256x256 inputs and the full-length schedules.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile {s:?}; expected desk or paper"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest CSV; relative image paths resolve against its directory.
    pub manifest: Option<PathBuf>,
    pub dn_target: DnTarget,
    /// Train the denoiser layer jointly with the classifier instead of
    /// freezing it.
    pub end_to_end: bool,
    pub wauc: WaucOrientation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Seeds weight initialization; schedules carry their own data seeds.
    pub seed: u64,
    pub model: ModelConfig,
    pub denoiser: TrainSchedule,
    pub train: TrainSchedule,
    pub finetune: TrainSchedule,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => RunConfig {
                profile,
                seed: 1,
                model: ModelConfig::default(),
                denoiser: TrainSchedule::denoiser(),
                train: TrainSchedule::mcnet(),
                finetune: TrainSchedule::curriculum(),
                data: DataConfig::default(),
            },
            Profile::Desk => {
                let mut c = RunConfig::for_profile(Profile::Paper);
                c.profile = profile;
                c.model = ModelConfig::desk();
                c.denoiser.epochs = 30;
                c.denoiser.pairs_per_batch = 8;
                c.train.epochs = 50;
                c.train.pairs_per_batch = 8;
                c.finetune.epochs = 20;
                c.finetune.pairs_per_batch = 8;
                c.finetune.select_from = 6;
                c
            }
        }
    }

    /// Parses a config file. `profile_override` wins over the file's own
    /// `profile` key.
    pub fn from_toml(text: &str, profile_override: Option<Profile>) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(located(text, &e)))?;
        let profile = match (profile_override, doc.get("profile")) {
            (Some(p), _) => p,
            (None, None) => Profile::default(),
            (None, Some(v)) => {
                let s = v.as_str().ok_or_else(|| {
                    Error::Config(at(text, None, "profile", "profile must be a string".into()))
                })?;
                s.parse()
                    .map_err(|e: Error| Error::Config(at(text, None, "profile", inner(&e))))?
            }
        };
        let mut base = toml::Table::try_from(RunConfig::for_profile(profile))
            .map_err(|e| Error::Config(e.to_string()))?;
        base.insert("profile".into(), toml::Value::String(profile.to_string()));
        let mut merged = base.clone();
        overlay(&mut merged, doc.clone());
        merged.insert("profile".into(), toml::Value::String(profile.to_string()));
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(describe_merge_error(text, &base, &doc, &e)))?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile_override: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, profile_override).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn validate(&self, text: &str) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::Config(at(text, Some("model"), first_word(&e), inner(&e))))?;
        for (table, s) in [
            ("denoiser", &self.denoiser),
            ("train", &self.train),
            ("finetune", &self.finetune),
        ] {
            s.validate()
                .map_err(|e| Error::Config(at(text, Some(table), first_word(&e), inner(&e))))?;
        }
        Ok(())
    }

    /// Lines such as `train: 400 epochs, 20 images per batch (10 pairs)`.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "profile {}: {}x{} input, {} channels per branch, depth {}\n",
            self.profile,
            self.model.input_size,
            self.model.input_size,
            self.model.branch_width,
            self.model.depth
        );
        for (name, s) in [
            ("denoiser", &self.denoiser),
            ("train", &self.train),
            ("finetune", &self.finetune),
        ] {
            out.push_str(&format!(
                "{name}: {} epochs, {} images per batch ({} pairs), lr {:e} x{} every {} epochs\n",
                s.epochs,
                2 * s.pairs_per_batch,
                s.pairs_per_batch,
                s.lr.initial,
                s.lr.factor,
                s.lr.period
            ));
        }
        out
    }
}

/// Recursively replaces entries of `base` with those of `top`.
fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn located(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim();
    match e.span() {
        Some(span) => format!("line {}: {msg}", line_of(text, span.start)),
        None => msg.to_string(),
    }
}

/// Finds the line that sets `key` inside `[table]` (or at top level).
pub fn key_line(text: &str, table: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            current = Some(h.trim_end_matches(']').trim().to_string());
            continue;
        }
        let Some((k, _)) = line.split_once('=') else {
            continue;
        };
        let k = k.trim();
        let in_scope = current.as_deref() == table;
        let dotted = table.is_some_and(|t| current.is_none() && k == format!("{t}.{key}"));
        if (in_scope && k == key) || dotted {
            return Some(i + 1);
        }
    }
    None
}

fn at(text: &str, table: Option<&str>, key: &str, msg: String) -> String {
    let name = table.map_or(key.to_string(), |t| format!("{t}.{key}"));
    match key_line(text, table, key).or_else(|| table.and_then(|t| key_line_table(text, t))) {
        Some(l) => format!("line {l}: {name}: {msg}"),
        None => format!("{name}: {msg}"),
    }
}

fn key_line_table(text: &str, table: &str) -> Option<usize> {
    text.lines()
        .position(|l| l.trim().trim_start_matches('[').trim_end_matches(']').trim() == table && l.trim().starts_with('['))
        .map(|i| i + 1)
}

/// The merged table has no spans; recover the line from the key named in
/// the message, or else from the first user key that fails on its own.
fn describe_merge_error(text: &str, base: &toml::Table, doc: &toml::Table, e: &toml::de::Error) -> String {
    let msg = e.message().trim().to_string();
    for table in ["model", "denoiser", "train", "finetune", "data"] {
        for key in key_candidates(&msg) {
            if let Some(l) = key_line(text, Some(table), &key) {
                return format!("line {l}: {table}.{key}: {msg}");
            }
        }
    }
    for key in key_candidates(&msg) {
        if let Some(l) = key_line(text, None, &key) {
            return format!("line {l}: {key}: {msg}");
        }
    }
    if let Some((table, key)) = failing_key(base, doc) {
        let name = table.as_deref().map_or(key.clone(), |t| format!("{t}.{key}"));
        if let Some(l) = key_line(text, table.as_deref(), &key) {
            return format!("line {l}: {name}: {msg}");
        }
        return format!("{name}: {msg}");
    }
    msg
}

fn failing_key(base: &toml::Table, doc: &toml::Table) -> Option<(Option<String>, String)> {
    let fails = |patch: toml::Table| {
        let mut m = base.clone();
        overlay(&mut m, patch);
        m.try_into::<RunConfig>().is_err()
    };
    for (k, v) in doc {
        if k == "profile" {
            continue;
        }
        match v {
            toml::Value::Table(t) if base.get(k).is_some_and(toml::Value::is_table) => {
                for (k2, v2) in t {
                    let mut inner = toml::Table::new();
                    inner.insert(k2.clone(), v2.clone());
                    let mut patch = toml::Table::new();
                    patch.insert(k.clone(), toml::Value::Table(inner));
                    if fails(patch) {
                        return Some((Some(k.clone()), k2.clone()));
                    }
                }
            }
            _ => {
                let mut patch = toml::Table::new();
                patch.insert(k.clone(), v.clone());
                if fails(patch) {
                    return Some((None, k.clone()));
                }
            }
        }
    }
    None
}

fn key_candidates(msg: &str) -> Vec<String> {
    msg.split('`')
        .skip(1)
        .step_by(2)
        .map(|s| s.rsplit('.').next().unwrap_or(s).to_string())
        .collect()
}

fn inner(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        e => e.to_string(),
    }
}

/// The config key an error message talks about: the earliest known field
/// name in the message.
fn first_word(e: &Error) -> &'static str {
    let msg = inner(e);
    if msg.contains("learning rate") || msg.contains("decay") {
        return "lr";
    }
    const KEYS: [&str; 16] = [
        "preprocessing",
        "dn_filters",
        "dn_filter_size",
        "dn_init",
        "depth",
        "kernel_set",
        "branch_width",
        "head_channels",
        "activation",
        "attention",
        "abs_blocks",
        "input_size",
        "epochs",
        "pairs_per_batch",
        "augment_probability",
        "select_from",
    ];
    KEYS.into_iter()
        .filter_map(|k| msg.find(k).map(|i| (i, k)))
        .min()
        .map_or("", |(_, k)| k)
}
