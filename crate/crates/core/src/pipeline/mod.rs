//! Data handling and training procedures.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod schedule;
pub mod synth;
pub mod train;

pub use augment::{augment, Dihedral, Transform};
pub use config::{DataConfig, Profile, RunConfig};
pub use dataset::{load_pairs, split_dataset, DatasetManifest, ManifestEntry, Pair, PairPaths, Source, Split, SplitOptions};
pub use schedule::{StepDecay, TrainSchedule};
pub use synth::synth_corpus;
pub use train::{
    curriculum_finetune, evaluate, prepare_mcnet, score_pairs, train_denoiser, train_mcnet, DnTarget, EpochRecord,
    MetricsLog, Observer, Resume, RunWriter, TrainOutcome,
};
