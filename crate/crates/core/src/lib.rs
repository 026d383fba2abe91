//! Domain-aware mix-normalization (DMN) and domain-aware center
//! regularization (DCR) for multi-source domain generalization, with
//! explicit backward passes and a small training harness.
//!
//! All numeric code is generic over [`Scalar`]; training runs in `f32` and
//! gradient checks re-run the same code in `f64`.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod norm;
pub mod numerics;
pub mod partition;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type NormLayerState32 = norm::NormLayerState<f32>;
pub type NormLayerState64 = norm::NormLayerState<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
