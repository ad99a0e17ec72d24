//! Optimizer settings and step-decay learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `lr(e) = initial * factor^floor((e - 1) / period)` for 1-based epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub initial: f64,
    pub factor: f64,
    pub period: usize,
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = epoch.saturating_sub(1) / self.period.max(1);
        self.initial * self.factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub lr: StepDecay,
    pub epochs: usize,
    /// Cover/stego pairs per minibatch; a batch holds twice as many images.
    pub pairs_per_batch: usize,
    pub augment_probability: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    /// Earliest epoch eligible as the selected checkpoint.
    pub select_from: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::mcnet()
    }
}

impl TrainSchedule {
    /// Denoiser recipe: 100 epochs, lr 1e-3 dropping tenfold every 25.
    pub fn denoiser() -> Self {
        TrainSchedule {
            lr: StepDecay {
                initial: 1e-3,
                factor: 0.1,
                period: 25,
            },
            epochs: 100,
            pairs_per_batch: 10,
            augment_probability: 0.4,
            seed: 0,
            max_steps: None,
            select_from: 1,
        }
    }

    /// Classifier recipe: 400 epochs, lr 1e-3 dropping tenfold every 40.
    pub fn mcnet() -> Self {
        TrainSchedule {
            lr: StepDecay {
                initial: 1e-3,
                factor: 0.1,
                period: 40,
            },
            epochs: 400,
            ..Self::denoiser()
        }
    }

    /// Low-payload fine-tuning: 200 epochs from lr 1e-7, tenfold drop every
    /// 100, selection restricted to epochs 51 onwards.
    pub fn curriculum() -> Self {
        TrainSchedule {
            lr: StepDecay {
                initial: 1e-7,
                factor: 0.1,
                period: 100,
            },
            epochs: 200,
            select_from: 51,
            ..Self::denoiser()
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr.lr(epoch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr.initial));
        }
        if !(self.lr.factor > 0.0 && self.lr.factor <= 1.0) {
            return bad(format!("decay factor must lie in (0, 1], got {}", self.lr.factor));
        }
        if self.lr.period == 0 {
            return bad("decay period must be at least 1 epoch".into());
        }
        if self.epochs == 0 || self.pairs_per_batch == 0 {
            return bad("epochs and pairs_per_batch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return bad(format!(
                "augment_probability must lie in [0, 1], got {}",
                self.augment_probability
            ));
        }
        if self.select_from == 0 || self.select_from > self.epochs {
            return bad(format!(
                "select_from {} is outside 1..={}",
                self.select_from, self.epochs
            ));
        }
        Ok(())
    }
}
