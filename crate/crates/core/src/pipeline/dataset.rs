//! Cover/stego pair lists, the train/val/test split and the manifest CSV.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGray;
use crate::stego::image_rng;

pub const TRAIN_FRACTION: f64 = 0.4;
pub const VAL_FRACTION: f64 = 0.1;
/// Share of the training pool set aside for the denoiser.
pub const DN_FRACTION: f64 = 1.0 / 7.0;
/// Share of the denoiser subset used for fitting; the rest validates.
pub const DN_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    DnTrain,
    DnVal,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::Val, Split::Test, Split::DnTrain, Split::DnVal];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::DnTrain => "dn_train",
            Split::DnVal => "dn_val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown split {s:?}")))
    }
}

/// One cover with its stego counterpart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPaths {
    pub cover: PathBuf,
    pub stego: PathBuf,
}

/// All pairs drawn from one image source (e.g. one database).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Source {
    pub tag: String,
    pub pairs: Vec<PairPaths>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cover_path: PathBuf,
    pub stego_path: PathBuf,
    pub source: String,
    pub split: Split,
}

/// Embedding settings recorded alongside the entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ManifestMeta {
    pub seed: u64,
    pub payload_bpp: Option<f64>,
    pub cost_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub meta: ManifestMeta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub seed: u64,
    /// Carve the denoiser subsets out of the training pool.
    pub dn_carve: bool,
}

fn share(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

/// Splits the first source 40/10/50 into train/val/test and adds every
/// further source to train. With `dn_carve`, a seventh of the training
/// pool moves to `dn_train`/`dn_val` (80/20).
pub fn split_dataset(sources: &[Source], opts: SplitOptions) -> Result<DatasetManifest> {
    let Some(primary) = sources.first() else {
        return Err(Error::Dataset("no image sources given".into()));
    };
    if let Some(empty) = sources.iter().find(|s| s.pairs.is_empty()) {
        return Err(Error::Dataset(format!("source {:?} is empty", empty.tag)));
    }
    let n = primary.pairs.len();
    let (n_train, n_val) = (share(n, TRAIN_FRACTION), share(n, VAL_FRACTION));
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Dataset(format!(
            "{n} images in {:?} are too few for a 40/10/50 split",
            primary.tag
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut image_rng(opts.seed, 0));
    let mut entries = Vec::new();
    let mut pool = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let e = entry(&primary.tag, &primary.pairs[i], split);
        if split == Split::Train {
            pool.push(e);
        } else {
            entries.push(e);
        }
    }
    for src in &sources[1..] {
        pool.extend(src.pairs.iter().map(|p| entry(&src.tag, p, Split::Train)));
    }
    if opts.dn_carve {
        pool.shuffle(&mut image_rng(opts.seed, 1));
        let dn = share(pool.len(), DN_FRACTION);
        let dn_train = share(dn, DN_TRAIN_FRACTION);
        if dn_train == 0 || dn == dn_train || dn >= pool.len() {
            return Err(Error::Dataset(format!(
                "training pool of {} is too small to carve a denoiser subset",
                pool.len()
            )));
        }
        for (rank, e) in pool.iter_mut().take(dn).enumerate() {
            e.split = if rank < dn_train { Split::DnTrain } else { Split::DnVal };
        }
    }
    entries.extend(pool);
    entries.sort_by_key(|e| e.split);
    Ok(DatasetManifest {
        entries,
        meta: ManifestMeta {
            seed: opts.seed,
            ..Default::default()
        },
    })
}

fn entry(tag: &str, p: &PairPaths, split: Split) -> ManifestEntry {
    ManifestEntry {
        cover_path: p.cover.clone(),
        stego_path: p.stego.clone(),
        source: tag.to_string(),
        split,
    }
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Fails if a cover or stego path sits in more than one of
    /// train/val/test, or if a denoiser pair is also in val/test.
    pub fn check_disjoint(&self) -> Result<()> {
        use std::collections::HashMap;
        let mut seen: HashMap<&Path, Split> = HashMap::new();
        for e in &self.entries {
            let group = match e.split {
                Split::DnTrain | Split::DnVal => Split::Train,
                s => s,
            };
            for p in [&e.cover_path, &e.stego_path] {
                if let Some(prev) = seen.insert(p, group) {
                    if prev != group {
                        return Err(Error::Dataset(format!(
                            "{} appears in both {prev} and {group}",
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// CSV with `# key=value` metadata lines ahead of the header.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!("# seed={}\n", self.meta.seed);
        if let Some(p) = self.meta.payload_bpp {
            out.push_str(&format!("# payload_bpp={p}\n"));
        }
        if let Some(m) = &self.meta.cost_model {
            out.push_str(&format!("# cost_model={m}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::Dataset(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
        out.push_str(&String::from_utf8(body).expect("csv writes utf-8"));
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut meta = ManifestMeta::default();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let Some((k, v)) = line[1..].trim().split_once('=') else {
                continue;
            };
            let v = v.trim();
            let bad = || Error::Dataset(format!("bad {k} value {v:?}"));
            match k.trim() {
                "seed" => meta.seed = v.parse().map_err(|_| bad())?,
                "payload_bpp" => meta.payload_bpp = Some(v.parse().map_err(|_| bad())?),
                "cost_model" => meta.cost_model = Some(v.to_string()),
                _ => {}
            }
        }
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let entries = r
            .deserialize()
            .enumerate()
            .map(|(i, row)| row.map_err(|e| Error::Dataset(format!("manifest row {}: {e}", i + 1))))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        Ok(DatasetManifest { entries, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// A cover and its stego version, decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub cover: ImageGray,
    pub stego: ImageGray,
}

impl Pair {
    pub fn new(cover: ImageGray, stego: ImageGray) -> Result<Self> {
        if (cover.width(), cover.height()) != (stego.width(), stego.height()) {
            return Err(Error::Dataset(format!(
                "cover is {}x{} but stego is {}x{}",
                cover.width(),
                cover.height(),
                stego.width(),
                stego.height()
            )));
        }
        Ok(Pair { cover, stego })
    }
}

/// Decodes every pair of `split`; relative paths resolve against `base`.
pub fn load_pairs(manifest: &DatasetManifest, split: Split, base: &Path) -> Result<Vec<Pair>> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    manifest
        .split(split)
        .map(|e| {
            Pair::new(
                ImageGray::load(&resolve(&e.cover_path))?,
                ImageGray::load(&resolve(&e.stego_path))?,
            )
        })
        .collect()
}
