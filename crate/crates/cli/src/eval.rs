//! `eval`: score a checkpoint on one manifest split.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use mcnet_core::metrics::{Report, WaucOrientation};
use mcnet_core::model::{Checkpointable, McNet};
use mcnet_core::pipeline::{evaluate, load_pairs, DatasetManifest, Split};

use crate::EvalArgs;

/// Loads `split` of the manifest at `path` and evaluates `net` on it.
pub fn evaluate_manifest(net: &McNet<f32>, path: &Path, split: Split, wauc: WaucOrientation) -> Result<(usize, Report)> {
    let m = DatasetManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let pairs = load_pairs(&m, split, base)?;
    if pairs.is_empty() {
        bail!("{} has no {split} pairs", path.display());
    }
    Ok((pairs.len(), evaluate(net, &pairs, wauc)?))
}

pub fn write_report(dir: &Path, r: &Report) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    for (name, text) in [("report.csv", r.to_csv()), ("roc.csv", r.roc_csv())] {
        let p = dir.join(name);
        fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if !a.checkpoint.exists() {
        bail!("checkpoint {} not found", a.checkpoint.display());
    }
    let (net, meta) =
        McNet::<f32>::open(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    info!(
        "{}: epoch {}, step {}, seed {}",
        a.checkpoint.display(),
        meta.epoch,
        meta.step,
        meta.seed
    );
    let (n, report) = evaluate_manifest(&net, &a.manifest, a.split, a.wauc)?;
    info!("{n} {} pairs from {}", a.split, a.manifest.display());
    print!("{}", report.to_csv());
    if let Some(dir) = &a.out {
        write_report(dir, &report)?;
        info!("wrote report.csv and roc.csv to {}", dir.display());
    }
    Ok(())
}
