//! Motion-focused video tokenization with a learned threshold, and the
//! domain-adaptive training loop around it.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below fix the common instantiations.

pub mod adapt;
pub mod bench;
pub mod config;
pub mod data;
pub mod model;
pub mod nn;
pub mod policy;
pub mod scalar;
pub mod tokenizer;

pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Video32 = tokenizer::VideoTensor<f32>;
pub type Vit32 = model::Vit<f32>;
pub type Vit64 = model::Vit<f64>;
pub type Policy64 = policy::ThresholdPolicy<f64>;
pub type Sample32 = adapt::Sample<f32>;
pub type Trainer32 = adapt::Trainer<f32>;
pub type TrainedModel32 = adapt::TrainedModel<f32>;
