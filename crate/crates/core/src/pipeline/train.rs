//! Training loops for the denoiser and the classifier, curriculum
//! fine-tuning, and batch scoring.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use mcnet_tensor::{Adamax, Graph, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::{augment, batch_rng};
use super::dataset::Pair;
use super::schedule::TrainSchedule;
use crate::error::{Error, Result};
use crate::image::ImageGray;
use crate::metrics::{self, Report, ScoreSet, WaucOrientation};
use crate::model::{images_to_tensor, Checkpoint, Checkpointable, Denoiser, McNet, ModelConfig, TrainMeta};
use crate::stego::image_rng;

/// Abort once the training loss has stayed above this multiple of the
/// first epoch's loss for [`DIVERGENCE_PATIENCE`] epochs in a row.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 5;
/// Images per forward pass when scoring.
pub const EVAL_CHUNK: usize = 32;
/// Clamp for probabilities in the validation cross-entropy.
const PROB_EPS: f64 = 1e-7;
const SHUFFLE_STREAM: u64 = 0x7368_7566_666c_6500;

/// What the denoiser learns to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DnTarget {
    /// `|I - X|`: zero for covers, the embedding change map for stegos.
    #[default]
    Residual,
    /// The input image itself.
    Image,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss; absent for the pre-training evaluation row.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_pe: Option<f64>,
    pub lr: f64,
    pub steps: u64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_pe,lr";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{}",
            self.epoch,
            opt(self.train_loss),
            self.val_loss,
            opt(self.val_pe),
            self.lr
        )
    }
}

/// Append-only epoch log.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if !path.exists() {
            fs::write(&path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
        }
        Ok(MetricsLog { path })
    }

    pub fn append(&self, rec: &EpochRecord) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", rec.csv_row()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Called after every epoch with the current network.
pub trait Observer<N> {
    fn epoch_end(&mut self, _rec: &EpochRecord, _net: &N, _meta: &TrainMeta, _is_best: bool) -> Result<()> {
        Ok(())
    }
}

impl<N> Observer<N> for () {}

/// Writes `metrics.csv` plus `last.mcnt` every epoch and `best.mcnt`
/// whenever the selection improves.
#[derive(Debug)]
pub struct RunWriter {
    pub log: MetricsLog,
    pub checkpoints: PathBuf,
}

impl RunWriter {
    pub const LAST: &'static str = "last.mcnt";
    pub const BEST: &'static str = "best.mcnt";

    pub fn new(metrics: impl Into<PathBuf>, checkpoints: impl Into<PathBuf>) -> Result<Self> {
        let checkpoints = checkpoints.into();
        fs::create_dir_all(&checkpoints).map_err(|e| Error::io(&checkpoints, e))?;
        Ok(RunWriter {
            log: MetricsLog::open(metrics)?,
            checkpoints,
        })
    }
}

impl<N: Checkpointable> Observer<N> for RunWriter {
    fn epoch_end(&mut self, rec: &EpochRecord, net: &N, meta: &TrainMeta, is_best: bool) -> Result<()> {
        self.log.append(rec)?;
        net.save(&self.checkpoints.join(Self::LAST), meta.clone())?;
        if is_best {
            net.save(&self.checkpoints.join(Self::BEST), meta.clone())?;
        }
        Ok(())
    }
}

/// Where an interrupted run picks up.
#[derive(Debug, Clone)]
pub struct Resume<N> {
    /// Metadata of the last completed epoch.
    pub meta: TrainMeta,
    pub best: Option<(N, TrainMeta)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<N> {
    /// Network at the selected epoch.
    pub best: N,
    pub best_meta: TrainMeta,
    /// Network after the final step.
    pub last: N,
    pub last_meta: TrainMeta,
    pub history: Vec<EpochRecord>,
}

/// Interleaves each pair as cover then stego.
pub fn batch_images(pairs: &[Pair]) -> Vec<&ImageGray> {
    pairs.iter().flat_map(|p| [&p.cover, &p.stego]).collect()
}

fn batch_labels(pairs: usize) -> Vec<f32> {
    (0..pairs).flat_map(|_| [0.0, 1.0]).collect()
}

fn image_size(pairs: &[Pair]) -> Result<usize> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Dataset("no training pairs".into()))?;
    Ok(first.cover.width())
}

/// The per-task half of the training loop.
trait Task {
    type Net: Checkpointable + Clone;
    const USES_PE: bool;

    /// Forward and backward on one minibatch, leaving gradients in the
    /// network's parameters. Returns the loss.
    fn step(&self, net: &mut Self::Net, batch: &[Pair]) -> Result<f64>;
    /// `(loss, P_E)` on held-out pairs.
    fn validate(&self, net: &Self::Net, val: &[Pair]) -> Result<(f64, Option<f64>)>;
}

fn better(uses_pe: bool, cand: &EpochRecord, best: &TrainMeta) -> bool {
    let loss_better = best.val_loss.is_none_or(|b| cand.val_loss < b);
    if uses_pe {
        match (cand.val_pe, best.val_pe) {
            (Some(c), Some(b)) if c != b => c < b,
            _ => loss_better,
        }
    } else {
        loss_better
    }
}

fn run<K: Task, O: Observer<K::Net>>(
    task: &K,
    mut net: K::Net,
    train: &[Pair],
    val: &[Pair],
    schedule: &TrainSchedule,
    resume: Option<Resume<K::Net>>,
    observer: &mut O,
) -> Result<TrainOutcome<K::Net>> {
    schedule.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(format!(
            "training needs pairs in both train ({}) and val ({})",
            train.len(),
            val.len()
        )));
    }
    let (mut meta, mut best) = match resume {
        Some(r) => (r.meta, r.best),
        None => (
            TrainMeta {
                seed: schedule.seed,
                ..TrainMeta::default()
            },
            None,
        ),
    };
    let mut history = Vec::new();
    let mut above = 0;
    let limit = schedule.max_steps.unwrap_or(u64::MAX);
    let mut epoch = meta.epoch;
    while epoch < schedule.epochs && meta.step < limit {
        epoch += 1;
        let lr = schedule.lr(epoch);
        let opt = Adamax::with_lr(lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut image_rng(schedule.seed ^ SHUFFLE_STREAM, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(schedule.pairs_per_batch).enumerate() {
            if meta.step >= limit {
                break;
            }
            let picked: Vec<Pair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mut rng = batch_rng(schedule.seed, epoch, b);
            let batch = augment(&picked, schedule.augment_probability, &mut rng);
            let loss = task.step(&mut net, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite training loss at epoch {epoch}, batch {b}"
                )));
            }
            opt.step(net.store_mut());
            total += loss;
            batches += 1;
            meta.step += 1;
        }
        let train_loss = total / batches.max(1) as f64;
        let (val_loss, val_pe) = task.validate(&net, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!(
                "validation loss is {val_loss} after epoch {epoch} (train loss {train_loss})"
            )));
        }
        let initial = *meta.initial_loss.get_or_insert(train_loss);
        above = if train_loss > DIVERGENCE_FACTOR * initial { above + 1 } else { 0 };
        let rec = EpochRecord {
            epoch,
            train_loss: Some(train_loss),
            val_loss,
            val_pe,
            lr,
            steps: meta.step,
        };
        meta.epoch = epoch;
        meta.lr = lr;
        meta.val_loss = Some(val_loss);
        meta.val_pe = val_pe;
        let eligible = epoch >= schedule.select_from;
        let is_best = eligible && best.as_ref().is_none_or(|(_, m)| better(K::USES_PE, &rec, m));
        if is_best {
            meta.best_epoch = Some(epoch);
            best = Some((net.clone(), meta.clone()));
        }
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6} pe {} lr {lr:e}{}",
            val_pe.map_or("-".into(), |p| format!("{p:.4}")),
            if is_best { " *" } else { "" }
        );
        observer.epoch_end(&rec, &net, &meta, is_best)?;
        history.push(rec);
        if above >= DIVERGENCE_PATIENCE {
            return Err(Error::Training(format!(
                "loss {train_loss} has exceeded {DIVERGENCE_FACTOR}x the initial {initial} for {above} epochs"
            )));
        }
    }
    let (best, best_meta) = match best {
        Some(b) => b,
        None => (net.clone(), meta.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_meta,
        last: net,
        last_meta: meta,
        history,
    })
}

struct DenoiserTask {
    target: DnTarget,
}

impl DenoiserTask {
    fn target(&self, pairs: &[Pair], size: usize) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(pairs.len() * 2 * size * size);
        for p in pairs {
            for img in [&p.cover, &p.stego] {
                match self.target {
                    DnTarget::Residual => data.extend(
                        img.pixels()
                            .iter()
                            .zip(p.cover.pixels())
                            .map(|(&i, &x)| (i as f32 - x as f32).abs()),
                    ),
                    DnTarget::Image => data.extend(img.pixels().iter().map(|&v| v as f32)),
                }
            }
        }
        Ok(Tensor::new([pairs.len() * 2, 1, size, size], data)?)
    }

    fn loss(&self, g: &mut Graph<f32>, net: &Denoiser<f32>, pairs: &[Pair]) -> Result<mcnet_tensor::Var> {
        let size = image_size(pairs)?;
        let x = g.input(images_to_tensor(&batch_images(pairs), size)?)?;
        let out = net.forward(g, x)?;
        Ok(g.mse_loss(out.residual, &self.target(pairs, size)?)?)
    }
}

impl Task for DenoiserTask {
    type Net = Denoiser<f32>;
    const USES_PE: bool = false;

    fn step(&self, net: &mut Denoiser<f32>, batch: &[Pair]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, net, batch)?;
        g.backward(loss)?;
        net.store_mut().absorb_grads(&g);
        Ok(g.item(loss) as f64)
    }

    fn validate(&self, net: &Denoiser<f32>, val: &[Pair]) -> Result<(f64, Option<f64>)> {
        let mut sum = 0.0;
        for chunk in val.chunks(EVAL_CHUNK / 2) {
            let mut g = Graph::new();
            let loss = self.loss(&mut g, net, chunk)?;
            sum += g.item(loss) as f64 * chunk.len() as f64;
        }
        Ok((sum / val.len() as f64, None))
    }
}

struct McNetTask;

impl Task for McNetTask {
    type Net = McNet<f32>;
    const USES_PE: bool = true;

    fn step(&self, net: &mut McNet<f32>, batch: &[Pair]) -> Result<f64> {
        let size = net.config().input_size;
        let mut g = Graph::new();
        let x = g.input(images_to_tensor(&batch_images(batch), size)?)?;
        let fwd = net.forward_train(&mut g, x, true)?;
        let loss = g.bce_loss(fwd.stego, &batch_labels(batch.len()))?;
        g.backward(loss)?;
        net.store_mut().absorb_grads(&g);
        Ok(g.item(loss) as f64)
    }

    fn validate(&self, net: &McNet<f32>, val: &[Pair]) -> Result<(f64, Option<f64>)> {
        let scores = score_pairs(net, val)?;
        Ok((bce(&scores), Some(metrics::pe_min(&scores)?)))
    }
}

/// Stego-class probabilities (eval mode) for every cover and stego.
pub fn score_pairs(net: &McNet<f32>, pairs: &[Pair]) -> Result<ScoreSet> {
    score_images(net, &batch_images(pairs), &batch_labels(pairs.len()))
}

pub fn score_images(net: &McNet<f32>, images: &[&ImageGray], labels: &[f32]) -> Result<ScoreSet> {
    let size = net.config().input_size;
    let mut scores = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let x = g.input(images_to_tensor(chunk, size)?)?;
        let fwd = net.forward_eval(&mut g, x)?;
        scores.extend(g.data(fwd.stego).iter().map(|&p| p as f64));
    }
    ScoreSet::new(scores, labels.iter().map(|&l| l as u8).collect())
}

/// Mean binary cross-entropy of a score set, with the training clamp.
pub fn bce(s: &ScoreSet) -> f64 {
    let total: f64 = s
        .scores
        .iter()
        .zip(&s.labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / s.len() as f64
}

/// P_E, AUC, WAUC and the ROC curve on a set of pairs.
pub fn evaluate(net: &McNet<f32>, pairs: &[Pair], orientation: WaucOrientation) -> Result<Report> {
    if pairs.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    metrics::report(&score_pairs(net, pairs)?, orientation)
}

/// Fits the denoiser on `dn_train`, keeping the epoch with the lowest
/// validation loss.
pub fn train_denoiser<O: Observer<Denoiser<f32>>>(
    net: Denoiser<f32>,
    train: &[Pair],
    val: &[Pair],
    schedule: &TrainSchedule,
    target: DnTarget,
    resume: Option<Resume<Denoiser<f32>>>,
    observer: &mut O,
) -> Result<TrainOutcome<Denoiser<f32>>> {
    run(&DenoiserTask { target }, net, train, val, schedule, resume, observer)
}

/// Builds a classifier for training. With learned preprocessing a trained
/// denoiser is required; its first layer is frozen unless `end_to_end`.
pub fn prepare_mcnet(
    config: ModelConfig,
    seed: u64,
    denoiser: Option<&Denoiser<f32>>,
    end_to_end: bool,
) -> Result<McNet<f32>> {
    let learned = config.preprocessing == crate::model::Preprocessing::LearnedDn;
    let mut net = McNet::new(config, seed)?;
    match (learned, denoiser) {
        (true, Some(dn)) => {
            net.load_denoiser(dn)?;
            net.freeze_denoiser(!end_to_end);
        }
        (true, None) if !end_to_end => {
            return Err(Error::Config(
                "learned_dn preprocessing needs a trained denoiser unless training end to end".into(),
            ))
        }
        (false, Some(_)) => {
            return Err(Error::Config("a denoiser was supplied but preprocessing is not learned_dn".into()))
        }
        _ => {}
    }
    Ok(net)
}

/// Trains the classifier, keeping the epoch with the lowest validation
/// P_E (ties broken by validation loss) among epochs from
/// `schedule.select_from` on.
pub fn train_mcnet<O: Observer<McNet<f32>>>(
    net: McNet<f32>,
    train: &[Pair],
    val: &[Pair],
    schedule: &TrainSchedule,
    resume: Option<Resume<McNet<f32>>>,
    observer: &mut O,
) -> Result<TrainOutcome<McNet<f32>>> {
    run(&McNetTask, net, train, val, schedule, resume, observer)
}

#[derive(Debug, Clone)]
pub struct CurriculumOutcome {
    /// Validation of the transferred weights before any update.
    pub initial: EpochRecord,
    pub run: TrainOutcome<McNet<f32>>,
}

/// Transfers `source` into a fresh run and fine-tunes it on lower-payload
/// pairs. The epoch-0 row is logged before training starts.
pub fn curriculum_finetune<O: Observer<McNet<f32>>>(
    source: &Checkpoint,
    expected: &ModelConfig,
    train: &[Pair],
    val: &[Pair],
    schedule: &TrainSchedule,
    observer: &mut O,
) -> Result<CurriculumOutcome> {
    let (net, _) = McNet::<f32>::transfer(source, expected)?;
    let (val_loss, val_pe) = McNetTask.validate(&net, val)?;
    let initial = EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss,
        val_pe,
        lr: schedule.lr(1),
        steps: 0,
    };
    let meta = TrainMeta {
        seed: schedule.seed,
        val_loss: Some(val_loss),
        val_pe,
        ..TrainMeta::default()
    };
    observer.epoch_end(&initial, &net, &meta, false)?;
    let run = train_mcnet(net, train, val, schedule, None, observer)?;
    Ok(CurriculumOutcome { initial, run })
}
