//! Adaptive auxiliary-loss reweighting for image inpainting at desk scale:
//! tunable perceptual/style losses, the weight-adaptation loop, baseline
//! reweighters, and the tensor/autodiff machinery they run on.

pub mod awa;
pub mod baselines;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tunable;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
