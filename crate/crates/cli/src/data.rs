//! `gen-synth` and `embed`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use mcnet_core::image::ImageGray;
use mcnet_core::pipeline::dataset::ManifestMeta;
use mcnet_core::pipeline::{split_dataset, synth_corpus, PairPaths, Source, SplitOptions};
use mcnet_core::stego::{embed as embed_image, image_rng, noise_image, CostRegistry};
use rayon::prelude::*;

use crate::{EmbedArgs, GenSynthArgs};

pub const MANIFEST: &str = "manifest.csv";
const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "pnm", "png"];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    create_dir(&a.out)?;
    let images = synth_corpus(a.n as usize, a.size as usize, a.seed)?;
    let width = a.n.to_string().len().max(5);
    for (i, img) in images.iter().enumerate() {
        img.save(&a.out.join(format!("synth_{i:0width$}.pgm")))?;
    }
    info!("wrote {} {}x{} covers (seed {}) to {}", a.n, a.size, a.size, a.seed, a.out.display());
    Ok(())
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

struct Job {
    index: u64,
    cover: PathBuf,
    /// Relative to the output directory.
    stego: PathBuf,
    noise: Option<PathBuf>,
}

struct Done {
    lambda: f64,
    entropy: f64,
    changes: usize,
}

fn run_job(job: &Job, a: &EmbedArgs, registry: &CostRegistry) -> Result<Done> {
    let cover = ImageGray::load(&job.cover)?;
    let mut rng = image_rng(a.seed, job.index);
    let e = embed_image(registry, &cover, &a.model, a.payload, &mut rng)
        .with_context(|| format!("embedding {}", job.cover.display()))?;
    let changes = e.noise.iter().filter(|&&n| n != 0).count();
    let dst = a.out.join(&job.stego);
    if changes == 0 {
        // unchanged pixels: keep the cover's exact bytes
        fs::copy(&job.cover, &dst).with_context(|| format!("cannot write {}", dst.display()))?;
    } else {
        e.stego.save(&dst)?;
    }
    if let Some(path) = &job.noise {
        noise_image(cover.width(), cover.height(), &e.noise)?.save(path)?;
    }
    log::debug!(
        "{}: lambda {:.6}, {:.6} bpp, {changes} changes",
        job.cover.display(),
        e.lambda,
        e.entropy_bpp
    );
    Ok(Done {
        lambda: e.lambda,
        entropy: e.entropy_bpp,
        changes,
    })
}

fn source_tags(dirs: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    dirs.iter()
        .enumerate()
        .map(|(i, d)| {
            let base = d
                .canonicalize()
                .ok()
                .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .unwrap_or_else(|| format!("source{i}"));
            let tag = if seen.contains(&base) { format!("{base}-{i}") } else { base };
            seen.insert(tag.clone());
            tag
        })
        .collect()
}

pub fn embed(a: &EmbedArgs) -> Result<()> {
    let registry = CostRegistry::default();
    registry.get(&a.model)?;
    if !(a.payload.is_finite() && a.payload >= 0.0) {
        bail!(crate::Usage(format!("--payload must be a non-negative number, got {}", a.payload)));
    }
    create_dir(&a.out)?;
    let tags = source_tags(&a.cover_dirs);
    let mut jobs = Vec::new();
    let mut sources = Vec::new();
    for (dir, tag) in a.cover_dirs.iter().zip(&tags) {
        let covers = list_images(dir)?;
        if covers.is_empty() {
            bail!("no PGM/PNM/PNG images in {}", dir.display());
        }
        create_dir(&a.out.join("stego").join(tag))?;
        if let Some(n) = &a.noise_out {
            create_dir(&n.join(tag))?;
        }
        let mut pairs = Vec::new();
        for cover in covers {
            let cover = cover.canonicalize()?;
            let name = cover.file_name().expect("listed files have names");
            let stego = Path::new("stego").join(tag).join(name);
            let noise = a.noise_out.as_ref().map(|n| {
                let stem = Path::new(name).with_extension("png");
                n.join(tag).join(stem)
            });
            pairs.push(PairPaths {
                cover: cover.clone(),
                stego: stego.clone(),
            });
            jobs.push(Job {
                index: jobs.len() as u64,
                cover,
                stego,
                noise,
            });
        }
        sources.push(Source { tag: tag.clone(), pairs });
    }

    let mut manifest = split_dataset(
        &sources,
        SplitOptions {
            seed: a.seed,
            dn_carve: a.dn_carve,
        },
    )?;

    let done = jobs
        .par_iter()
        .map(|j| run_job(j, a, &registry))
        .collect::<Result<Vec<_>>>()?;
    manifest.meta = ManifestMeta {
        seed: a.seed,
        payload_bpp: Some(a.payload),
        cost_model: Some(a.model.clone()),
    };
    let path = a.out.join(MANIFEST);
    manifest.save(&path)?;

    let n = done.len() as f64;
    let mean = done.iter().map(|d| d.entropy).sum::<f64>() / n;
    let worst = done.iter().map(|d| (d.entropy - a.payload).abs()).fold(0.0, f64::max);
    let changed = done.iter().map(|d| d.changes).sum::<usize>();
    let lambda = done.iter().map(|d| d.lambda).sum::<f64>() / n;
    info!(
        "embedded {} images with {} at {} bpp (seed {}): achieved {mean:.6} bpp mean, max deviation {worst:.1e}, mean lambda {lambda:.4}, {changed} pixels changed",
        done.len(),
        a.model,
        a.payload,
        a.seed
    );
    let counts: Vec<String> = mcnet_core::pipeline::Split::ALL
        .iter()
        .map(|&s| format!("{s} {}", manifest.count(s)))
        .collect();
    info!("wrote {} ({})", path.display(), counts.join(", "));
    println!("achieved payload {mean:.6} bpp (max deviation {worst:.1e}) over {} images", done.len());
    Ok(())
}
