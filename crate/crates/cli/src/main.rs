//! `mcnet`: corpus generation, embedding, training, evaluation, ablation
//! grids and the verification suite behind one binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod ablate;
mod data;
mod eval;
mod oracle;
mod run;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcnet_core::metrics::WaucOrientation;
use mcnet_core::pipeline::{Profile, Split};

/// Misuse detected after argument parsing; exits with 2 like a clap error.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub const THREADS_VAR: &str = "MCNET_THREADS";

#[derive(Parser)]
#[command(name = "mcnet", version, about = "Steganalysis lab: embed, train, evaluate and verify M-CNet detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic grayscale cover corpus as PGM files.
    GenSynth(GenSynthArgs),
    /// Embed every cover with a simulated ternary embedder and write a manifest.
    Embed(EmbedArgs),
    /// Train the denoiser on the dn_train/dn_val splits.
    TrainDn(RunArgs),
    /// Train the classifier on the train/val splits.
    Train(TrainArgs),
    /// Fine-tune a trained classifier on a lower-payload manifest.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Train and evaluate every cell of a configuration grid.
    Ablate(AblateArgs),
    /// Run the gradient, solver, metric and round-trip checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
pub struct GenSynthArgs {
    /// Number of images.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Side length in pixels.
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(16..))]
    pub size: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EmbedArgs {
    /// Directory of cover images (PGM/PNM/PNG). Repeat to add sources; the
    /// first is split 40/10/50 into train/val/test, the rest go to train.
    #[arg(long = "cover-dir", required = true)]
    pub cover_dirs: Vec<PathBuf>,
    /// Cost model name.
    #[arg(long, default_value = "inverse_variance")]
    pub model: String,
    /// Payload in bits per pixel.
    #[arg(long, default_value_t = 0.4)]
    pub payload: f64,
    /// Seeds both the embedding draws and the split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for stego images and manifest.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write embedding-change maps (-1 black, 0 gray, +1 white) here.
    #[arg(long)]
    pub noise_out: Option<PathBuf>,
    /// Carve the denoiser subsets dn_train/dn_val out of the training pool.
    #[arg(long)]
    pub dn_carve: bool,
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Run configuration (TOML). Defaults to the profile's built-in values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; holds the config copy, manifest, checkpoints and logs.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Scale preset; overrides the config's own `profile`.
    #[arg(long, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    /// Manifest CSV; overrides `data.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue from the stage's last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Print the resolved configuration and stop.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Trained denoiser checkpoint; defaults to the run directory's best one.
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Classifier checkpoint trained at the higher payload.
    #[arg(long)]
    pub source: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Directory for report.csv and roc.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which TPR band of the weighted AUC gets double weight.
    #[arg(long, default_value = "low_tpr", value_parser = parse_wauc)]
    pub wauc: WaucOrientation,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Grid file (TOML) listing the axes to cross.
    #[arg(long)]
    pub grid: PathBuf,
    /// Consolidated results table (CSV).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Also validate these checkpoint files.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Base seed for the randomized checks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run only the named checks (repeatable).
    #[arg(long)]
    pub only: Vec<String>,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: mcnet_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: mcnet_core::Error| e.to_string())
}

fn parse_wauc(s: &str) -> Result<WaucOrientation, String> {
    match s {
        "low_tpr" => Ok(WaucOrientation::LowTpr),
        "high_tpr" => Ok(WaucOrientation::HighTpr),
        _ => Err(format!("expected low_tpr or high_tpr, got {s:?}")),
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    init_threads()?;
    match command {
        Command::GenSynth(a) => data::gen_synth(&a),
        Command::Embed(a) => data::embed(&a),
        Command::TrainDn(a) => run::train_dn(&a),
        Command::Train(a) => run::train(&a),
        Command::Finetune(a) => run::finetune(&a),
        Command::Eval(a) => eval::eval(&a),
        Command::Ablate(a) => ablate::ablate(&a),
        Command::Verify(a) => verify::verify(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
