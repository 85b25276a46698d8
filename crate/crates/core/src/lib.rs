//! A jointly trained bi-encoder, fusion encoder and text decoder for
//! document retrieval, sentence localization and query-conditioned
//! generation.

pub mod datasynth;
pub mod error;
pub mod eval;
pub mod generation;
pub mod model;
pub mod records;
pub mod retrieval;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
#[cfg(test)]
mod testutil;
pub mod text;
pub mod training;

pub use error::{CheckpointError, GearError, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Model32 = model::GearModel<f32>;
pub type Model64 = model::GearModel<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
