//! Deterministic simulator for federated adversarial training.

pub mod attacks;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{GradientBundle, GradientEntry, Network};
pub use rng::RngStream;
pub use tensor::Tensor;
