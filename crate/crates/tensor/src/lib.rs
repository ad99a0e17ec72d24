//! Dense tensors with a tape-based reverse-mode autograd, limited to the
//! operations a small steganalysis CNN needs.
//!
//! Training runs in `f32`; every op is generic over [`Scalar`] so the same
//! code can be checked against finite differences in `f64`.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{ConvAlgo, Graph, OpTiming, Profile, Var};
pub use nn::{ParamId, ParamStore, Parameter};
pub use ops::Activation;
pub use optim::Adamax;
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
