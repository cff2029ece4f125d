//! SE-LRCN: squeeze-and-excitation recalibration for a ResNet frame encoder
//! feeding an LSTM, with a small reverse-mode autodiff engine, a video data
//! pipeline and training utilities.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod resnet;
pub mod rng;
pub mod scalar;
pub mod se;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type SeLrcn32 = model::SeLrcn<f32>;
pub type SeLrcn64 = model::SeLrcn<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
