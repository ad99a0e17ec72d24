//! Steganalysis lab: filter banks, an embedding simulator, the M-CNet
//! detector, its training pipeline and evaluation metrics.

pub mod banks;
pub mod error;
pub mod image;
pub mod init;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod stego;

pub use error::{Error, Result};
