//! Run directories and the `train-dn`, `train` and `finetune` commands.
//!
//! ```text
//! RUN/
//!   config.toml            resolved configuration, seeds included
//!   manifest.csv           copy of the manifest with absolute image paths
//!   .lock                  present while a command owns the directory
//!   checkpoints/{denoiser,mcnet,finetune}/{last,best}.mcnt
//!   logs/{denoiser,metrics,finetune}.csv
//!   reports/
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use mcnet_core::model::{Checkpoint, Checkpointable, Denoiser, McNet, Preprocessing};
use mcnet_core::pipeline::{
    curriculum_finetune, load_pairs, prepare_mcnet, train_denoiser, train_mcnet, DatasetManifest, EpochRecord, Pair,
    Resume, RunConfig, RunWriter, Split, TrainOutcome,
};

use crate::{FinetuneArgs, RunArgs, TrainArgs};

pub const CONFIG: &str = "config.toml";
pub const MANIFEST: &str = "manifest.csv";
pub const LOCK: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Denoiser,
    McNet,
    Finetune,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Denoiser => "denoiser",
            Stage::McNet => "mcnet",
            Stage::Finetune => "finetune",
        }
    }

    fn log_name(self) -> &'static str {
        match self {
            Stage::Denoiser => "denoiser.csv",
            Stage::McNet => "metrics.csv",
            Stage::Finetune => "finetune.csv",
        }
    }

    fn splits(self) -> (Split, Split) {
        match self {
            Stage::Denoiser => (Split::DnTrain, Split::DnVal),
            _ => (Split::Train, Split::Val),
        }
    }
}

/// Removes the lockfile when dropped.
pub struct Lock(PathBuf);

impl Lock {
    pub fn acquire(dir: &Path) -> Result<Lock> {
        let path = dir.join(LOCK);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                anyhow!(
                    "{} is in use by another command (delete {} if that process is gone)",
                    dir.display(),
                    path.display()
                )
            } else {
                anyhow!("cannot create {}: {e}", path.display())
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Lock(path))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct RunDir {
    pub root: PathBuf,
    _lock: Lock,
}

impl RunDir {
    /// Creates (or re-enters) a run directory. Re-entering requires the same
    /// resolved config so every artifact in it comes from one setup.
    pub fn open(root: &Path, config: &RunConfig) -> Result<RunDir> {
        fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
        let lock = Lock::acquire(root)?;
        let text = config.to_toml()?;
        let path = root.join(CONFIG);
        if path.exists() {
            let stored = RunConfig::load(&path, None)?;
            if stored != *config {
                bail!(
                    "{} was created with a different configuration (see {}); use a new --run-dir",
                    root.display(),
                    path.display()
                );
            }
        } else {
            fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        }
        for sub in ["checkpoints", "logs", "reports"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(RunDir {
            root: root.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn checkpoints(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(stage.name())
    }

    pub fn writer(&self, stage: Stage) -> Result<RunWriter> {
        Ok(RunWriter::new(
            self.root.join("logs").join(stage.log_name()),
            self.checkpoints(stage),
        )?)
    }

    /// Copies the manifest in with every path made absolute.
    pub fn import_manifest(&self, src: &Path) -> Result<DatasetManifest> {
        let mut m = DatasetManifest::load(src)?;
        let base = src.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            for p in [&mut e.cover_path, &mut e.stego_path] {
                if p.is_relative() {
                    *p = absolute(&base.join(&*p))?;
                }
            }
        }
        m.save(&self.root.join(MANIFEST))?;
        Ok(m)
    }
}

pub fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("cannot resolve {}", p.display()))
}

/// Loads the config (or the profile defaults) and applies the flags.
pub fn resolve_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let mut cfg = RunConfig::load(path, a.profile)?;
            if let Some(m) = cfg.data.manifest.as_mut().filter(|m| m.is_relative()) {
                *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
            cfg
        }
        None => RunConfig::for_profile(a.profile.unwrap_or_default()),
    };
    if let Some(m) = &a.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if let Some(m) = cfg.data.manifest.as_mut() {
        *m = absolute(m)?;
    }
    Ok(cfg)
}

struct Prepared {
    cfg: RunConfig,
    dir: RunDir,
    train: Vec<Pair>,
    val: Vec<Pair>,
}

/// Shared start of every training command. `None` on `--dry-run`.
fn prepare(a: &RunArgs, stage: Stage) -> Result<Option<Prepared>> {
    let cfg = resolve_config(a)?;
    print!("{}", cfg.summary());
    if a.dry_run {
        return Ok(None);
    }
    let manifest = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| crate::Usage("no manifest: pass --manifest or set data.manifest".into()))?;
    let dir = RunDir::open(&a.run_dir, &cfg)?;
    let last = dir.checkpoints(stage).join(RunWriter::LAST);
    match (a.resume, last.exists()) {
        (true, false) => bail!("nothing to resume: {} does not exist", last.display()),
        (false, true) => bail!(
            "{} already holds a {} run; pass --resume to continue it",
            dir.root.display(),
            stage.name()
        ),
        _ => {}
    }
    let m = dir.import_manifest(&manifest)?;
    let (ts, vs) = stage.splits();
    let (train, val) = (load_pairs(&m, ts, &dir.root)?, load_pairs(&m, vs, &dir.root)?);
    if train.is_empty() || val.is_empty() {
        let hint = if stage == Stage::Denoiser { "; embed with --dn-carve" } else { "" };
        bail!(
            "manifest has {} {ts} and {} {vs} pairs; both must be non-empty{hint}",
            train.len(),
            val.len()
        );
    }
    info!(
        "{} stage: {} {ts} pairs, {} {vs} pairs, run directory {}",
        stage.name(),
        train.len(),
        val.len(),
        dir.root.display()
    );
    Ok(Some(Prepared { cfg, dir, train, val }))
}

fn resume<N: Checkpointable>(dir: &RunDir, stage: Stage, expected: &N::Config) -> Result<(N, Resume<N>)> {
    let ck = dir.checkpoints(stage);
    let (net, meta) = N::load(&ck.join(RunWriter::LAST), expected)?;
    let best_path = ck.join(RunWriter::BEST);
    let best = if best_path.exists() {
        Some(N::load(&best_path, expected)?)
    } else {
        None
    };
    info!("resuming after epoch {} (step {})", meta.epoch, meta.step);
    Ok((net, Resume { meta, best }))
}

fn report<N>(stage: Stage, dir: &RunDir, out: &TrainOutcome<N>) {
    let pe = out.best_meta.val_pe.map_or("-".into(), |v| format!("{v:.4}"));
    let loss = out.best_meta.val_loss.map_or("-".into(), |v| format!("{v:.6}"));
    println!(
        "{}: {} steps; selected epoch {} (val loss {loss}, val P_E {pe}); checkpoints in {}",
        stage.name(),
        out.last_meta.step,
        out.best_meta.best_epoch.map_or("-".into(), |e| e.to_string()),
        dir.checkpoints(stage).display()
    );
}

pub fn train_dn(a: &RunArgs) -> Result<()> {
    let Some(p) = prepare(a, Stage::Denoiser)? else {
        return Ok(());
    };
    let dn_cfg = p.cfg.model.denoiser();
    let (net, res) = if a.resume {
        let (n, r) = resume::<Denoiser<f32>>(&p.dir, Stage::Denoiser, &dn_cfg)?;
        (n, Some(r))
    } else {
        (Denoiser::new(dn_cfg, p.cfg.seed)?, None)
    };
    let mut w = p.dir.writer(Stage::Denoiser)?;
    let out = train_denoiser(net, &p.train, &p.val, &p.cfg.denoiser, p.cfg.data.dn_target, res, &mut w)?;
    report(Stage::Denoiser, &p.dir, &out);
    Ok(())
}

fn load_denoiser(a: &TrainArgs, p: &Prepared) -> Result<Option<Denoiser<f32>>> {
    if p.cfg.model.preprocessing != Preprocessing::LearnedDn {
        if a.denoiser.is_some() {
            bail!(crate::Usage("--denoiser needs model.preprocessing = \"learned_dn\"".into()));
        }
        return Ok(None);
    }
    let path = match &a.denoiser {
        Some(path) => path.clone(),
        None => p.dir.checkpoints(Stage::Denoiser).join(RunWriter::BEST),
    };
    if !path.exists() {
        if a.denoiser.is_none() && p.cfg.data.end_to_end {
            info!("no trained denoiser; its first layer starts from {:?}", p.cfg.model.dn_init);
            return Ok(None);
        }
        bail!(
            "denoiser checkpoint {} not found; run train-dn first or pass --denoiser",
            path.display()
        );
    }
    let (dn, meta) = Denoiser::<f32>::load(&path, &p.cfg.model.denoiser())
        .with_context(|| format!("loading {}", path.display()))?;
    info!("denoiser from {} (epoch {})", path.display(), meta.epoch);
    Ok(Some(dn))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let Some(p) = prepare(&a.run, Stage::McNet)? else {
        return Ok(());
    };
    let (net, res) = if a.run.resume {
        let (n, r) = resume::<McNet<f32>>(&p.dir, Stage::McNet, &p.cfg.model)?;
        (n, Some(r))
    } else {
        let dn = load_denoiser(a, &p)?;
        (prepare_mcnet(p.cfg.model.clone(), p.cfg.seed, dn.as_ref(), p.cfg.data.end_to_end)?, None)
    };
    let mut w = p.dir.writer(Stage::McNet)?;
    let out = train_mcnet(net, &p.train, &p.val, &p.cfg.train, res, &mut w)?;
    report(Stage::McNet, &p.dir, &out);
    Ok(())
}

pub fn finetune(a: &FinetuneArgs) -> Result<()> {
    let Some(p) = prepare(&a.run, Stage::Finetune)? else {
        return Ok(());
    };
    let mut w = p.dir.writer(Stage::Finetune)?;
    let out = if a.run.resume {
        let (net, res) = resume::<McNet<f32>>(&p.dir, Stage::Finetune, &p.cfg.model)?;
        train_mcnet(net, &p.train, &p.val, &p.cfg.finetune, Some(res), &mut w)?
    } else {
        let ck = Checkpoint::load(&a.source).with_context(|| format!("loading {}", a.source.display()))?;
        let c = curriculum_finetune(&ck, &p.cfg.model, &p.train, &p.val, &p.cfg.finetune, &mut w)?;
        log_initial(&c.initial);
        c.run
    };
    report(Stage::Finetune, &p.dir, &out);
    Ok(())
}

fn log_initial(r: &EpochRecord) {
    info!(
        "transferred weights before fine-tuning: val loss {:.6}, val P_E {}",
        r.val_loss,
        r.val_pe.map_or("-".into(), |v| format!("{v:.4}"))
    );
}

