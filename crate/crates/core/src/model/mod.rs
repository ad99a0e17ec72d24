//! Network definitions, their gradient-check harness and checkpoint files.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod gradcheck;
pub mod mcnet;

pub use checkpoint::{Checkpoint, Checkpointable, TrainMeta};
pub use config::{ActivationKind, DenoiserConfig, DnInit, ModelConfig, Preprocessing};
pub use denoiser::Denoiser;
pub use mcnet::{Forward, McNet};

use mcnet_tensor::{ParamStore, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::image::ImageGray;

/// Copies tensor values by name from `src` into `dst`. With a prefix only
/// matching names are copied; without one every parameter of `dst` must be
/// present in `src`.
pub(crate) fn copy_params<T: Scalar>(src: &ParamStore<T>, dst: &mut ParamStore<T>, prefix: Option<&str>) -> Result<()> {
    let names: Vec<String> = dst
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| prefix.is_none_or(|pre| n.starts_with(pre)))
        .collect();
    if names.is_empty() {
        return Err(Error::Checkpoint(format!("no parameters match {prefix:?}")));
    }
    for name in names {
        let from = src
            .by_name(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let id = dst.id(&name).expect("listed above");
        let to = &mut dst.get_mut(id).tensor;
        if from.tensor.shape() != to.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} where {:?} is expected",
                from.tensor.shape(),
                to.shape()
            )));
        }
        to.data_mut().copy_from_slice(from.tensor.data());
    }
    Ok(())
}

/// Stacks square images into an `[N, 1, S, S]` batch of raw pixel values.
pub fn images_to_tensor<T: Scalar>(images: &[&ImageGray], size: usize) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::InvalidImage("empty batch".into()));
    }
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.width() != size || img.height() != size {
            return Err(Error::InvalidImage(format!(
                "{}x{} image where {size}x{size} is expected",
                img.width(),
                img.height()
            )));
        }
        data.extend(img.pixels().iter().map(|&p| T::from_f64_lossy(p as f64)));
    }
    Ok(Tensor::new([images.len(), 1, size, size], data)?)
}
