//! Minimal dense/convolutional building blocks for the denoiser.

pub mod layers;
pub mod params;
pub mod scalar;

pub use layers::Act;
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
