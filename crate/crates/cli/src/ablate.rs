//! `ablate`: train and evaluate the cross product of config axes.
//!
//! ```toml
//! config = "base.toml"                 # optional; profile defaults otherwise
//! profile = "desk"                     # optional
//! manifest = "data/manifest.csv"       # training manifest
//! test_manifests = ["other/manifest.csv"]  # optional; default: the training one
//!
//! [axes]
//! "model.depth" = [2, 6]
//! "model.preprocessing" = ["none", "learned_dn"]
//! ```
//!
//! Axis keys are `table.key` paths into the run config (or a top-level key
//! such as `seed`). Relative paths resolve against the grid file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use mcnet_core::model::{Denoiser, Preprocessing};
use mcnet_core::pipeline::{
    load_pairs, prepare_mcnet, train_denoiser, train_mcnet, DatasetManifest, Pair, Profile, RunConfig, Split,
};
use rayon::prelude::*;

use crate::eval::evaluate_manifest;
use crate::run::absolute;
use crate::AblateArgs;

struct Grid {
    base: RunConfig,
    manifest: Option<PathBuf>,
    tests: Vec<PathBuf>,
    axes: Vec<(String, Vec<toml::Value>)>,
}

fn parse_grid(path: &Path) -> Result<Grid> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let doc: toml::Table = text.parse().with_context(|| format!("{} is not valid TOML", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let rel = |v: &toml::Value, key: &str| -> Result<PathBuf> {
        let s = v.as_str().ok_or_else(|| anyhow!("{}: {key} must be a string", path.display()))?;
        absolute(&dir.join(s))
    };
    let profile = match doc.get("profile") {
        Some(v) => Some(
            v.as_str()
                .ok_or_else(|| anyhow!("{}: profile must be a string", path.display()))?
                .parse::<Profile>()?,
        ),
        None => None,
    };
    let base = match doc.get("config") {
        Some(v) => {
            let cfg_path = rel(v, "config")?;
            let mut cfg = RunConfig::load(&cfg_path, profile)?;
            if let Some(m) = cfg.data.manifest.as_mut().filter(|m| m.is_relative()) {
                *m = cfg_path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
            cfg
        }
        None => RunConfig::for_profile(profile.unwrap_or_default()),
    };
    let manifest = doc.get("manifest").map(|v| rel(v, "manifest")).transpose()?;
    let tests = match doc.get("test_manifests") {
        Some(toml::Value::Array(a)) => a.iter().map(|v| rel(v, "test_manifests")).collect::<Result<_>>()?,
        Some(_) => bail!("{}: test_manifests must be a list of paths", path.display()),
        None => vec![],
    };
    for key in doc.keys() {
        if !["config", "profile", "manifest", "test_manifests", "axes"].contains(&key.as_str()) {
            bail!("{}: unknown key {key:?}", path.display());
        }
    }
    let mut axes = Vec::new();
    if let Some(t) = doc.get("axes") {
        let t = t.as_table().ok_or_else(|| anyhow!("{}: [axes] must be a table", path.display()))?;
        for (k, v) in t {
            let values = v
                .as_array()
                .ok_or_else(|| anyhow!("{}: axis {k:?} must be a list", path.display()))?;
            if values.is_empty() {
                bail!("{}: axis {k:?} has no values", path.display());
            }
            axes.push((k.clone(), values.clone()));
        }
    }
    if axes.is_empty() {
        bail!("{}: empty grid; list at least one axis under [axes]", path.display());
    }
    Ok(Grid {
        base,
        manifest,
        tests,
        axes,
    })
}

fn cells(axes: &[(String, Vec<toml::Value>)]) -> Vec<Vec<toml::Value>> {
    let mut out = vec![vec![]];
    for (_, values) in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect();
    }
    out
}

fn plain(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        v => v.to_string(),
    }
}

/// The base config with one cell's values written over it.
fn cell_config(grid: &Grid, values: &[toml::Value], grid_dir: &Path) -> Result<RunConfig> {
    let mut doc: toml::Table = grid.base.to_toml()?.parse()?;
    if let Some(m) = &grid.manifest {
        let data = doc.entry("data").or_insert_with(|| toml::Value::Table(Default::default()));
        if let Some(t) = data.as_table_mut() {
            t.insert("manifest".into(), toml::Value::String(m.display().to_string()));
        }
    }
    for ((key, _), v) in grid.axes.iter().zip(values) {
        let mut v = v.clone();
        if key == "data.manifest" {
            v = toml::Value::String(absolute(&grid_dir.join(plain(&v)))?.display().to_string());
        }
        match key.split_once('.') {
            Some((table, field)) => {
                let t = doc
                    .entry(table)
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| anyhow!("axis {key:?}: {table} is not a table"))?;
                t.insert(field.into(), v);
            }
            None => {
                doc.insert(key.clone(), v);
            }
        }
    }
    let text = toml::to_string(&doc)?;
    Ok(RunConfig::from_toml(&text, None)?)
}

fn pairs(manifest: &Path, split: Split) -> Result<Vec<Pair>> {
    let m = DatasetManifest::load(manifest)?;
    Ok(load_pairs(&m, split, manifest.parent().unwrap_or(Path::new(".")))?)
}

/// Denoisers depend only on these settings, so equal keys share one.
fn dn_key(cfg: &RunConfig) -> Option<String> {
    (cfg.model.preprocessing == Preprocessing::LearnedDn && !cfg.data.end_to_end).then(|| {
        format!(
            "{:?}|{:?}|{:?}|{}|{:?}",
            cfg.model.denoiser(),
            cfg.denoiser,
            cfg.data.dn_target,
            cfg.seed,
            cfg.data.manifest
        )
    })
}

fn train_dn(cfg: &RunConfig) -> Result<Denoiser<f32>> {
    let m = cfg.data.manifest.as_ref().expect("checked before");
    let (train, val) = (pairs(m, Split::DnTrain)?, pairs(m, Split::DnVal)?);
    if train.is_empty() || val.is_empty() {
        bail!("{} has no dn_train/dn_val pairs; embed with --dn-carve", m.display());
    }
    let net = Denoiser::new(cfg.model.denoiser(), cfg.seed)?;
    Ok(train_denoiser(net, &train, &val, &cfg.denoiser, cfg.data.dn_target, None, &mut ())?.best)
}

struct Row {
    cell: usize,
    test: PathBuf,
    samples: usize,
    pe: f64,
    auc: f64,
    wauc: f64,
    best_epoch: Option<usize>,
    steps: u64,
}

fn run_cell(i: usize, cfg: &RunConfig, dn: Option<&Denoiser<f32>>, tests: &[PathBuf]) -> Result<Vec<Row>> {
    let m = cfg.data.manifest.as_ref().expect("checked before");
    let (train, val) = (pairs(m, Split::Train)?, pairs(m, Split::Val)?);
    let net = prepare_mcnet(cfg.model.clone(), cfg.seed, dn, cfg.data.end_to_end)?;
    let out = train_mcnet(net, &train, &val, &cfg.train, None, &mut ())?;
    let tests = if tests.is_empty() { std::slice::from_ref(m) } else { tests };
    let mut rows = Vec::new();
    for t in tests {
        let (_, r) = evaluate_manifest(&out.best, t, Split::Test, cfg.data.wauc)?;
        info!("cell {i}: P_E {:.4} on {}", r.pe, t.display());
        rows.push(Row {
            cell: i,
            test: t.clone(),
            samples: r.samples,
            pe: r.pe,
            auc: r.auc,
            wauc: r.wauc,
            best_epoch: out.best_meta.best_epoch,
            steps: out.last_meta.step,
        });
    }
    Ok(rows)
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let grid = parse_grid(&a.grid)?;
    let grid_dir = a.grid.parent().unwrap_or(Path::new("."));
    let cell_values = cells(&grid.axes);
    let configs = cell_values
        .iter()
        .enumerate()
        .map(|(i, v)| cell_config(&grid, v, grid_dir).with_context(|| format!("grid cell {i}")))
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = configs.iter().position(|c| c.data.manifest.is_none()) {
        bail!("grid cell {i} has no training manifest; set manifest in the grid file");
    }
    info!("{} cells over {} axes", configs.len(), grid.axes.len());

    let mut keys: Vec<String> = configs.iter().filter_map(dn_key).collect();
    keys.sort();
    keys.dedup();
    let dns: BTreeMap<String, Denoiser<f32>> = keys
        .par_iter()
        .map(|k| {
            let cfg = configs.iter().find(|c| dn_key(c).as_ref() == Some(k)).expect("key from a config");
            Ok((k.clone(), train_dn(cfg)?))
        })
        .collect::<Result<_>>()?;

    let rows: Vec<Row> = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let dn = dn_key(cfg).map(|k| &dns[&k]);
            run_cell(i, cfg, dn, &grid.tests).with_context(|| format!("grid cell {i}"))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut header: Vec<String> = grid.axes.iter().map(|(k, _)| k.clone()).collect();
    header.extend(
        ["test_manifest", "samples", "pe", "auc", "wauc", "best_epoch", "steps"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut records = vec![header];
    for r in &rows {
        let mut rec: Vec<String> = cell_values[r.cell].iter().map(plain).collect();
        rec.extend([
            r.test.display().to_string(),
            r.samples.to_string(),
            r.pe.to_string(),
            r.auc.to_string(),
            r.wauc.to_string(),
            r.best_epoch.map_or(String::new(), |e| e.to_string()),
            r.steps.to_string(),
        ]);
        records.push(rec);
    }
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    for rec in &records {
        w.write_record(rec)?;
        println!("{}", rec.join(","));
    }
    w.flush()?;
    info!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}
