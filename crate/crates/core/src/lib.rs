//! Randomized smoothing toolkit: Monte Carlo certification, attacks on the
//! soft-smoothed classifier, and Gaussian / SmoothAdv / SmoothMix training of
//! small ReLU networks.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the `f64` versions used by the CLI and the test suites.

pub mod adversary;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod smoothing;
pub mod stats;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use rng::Stream;
pub use scalar::Scalar;

pub type Mlp = nn::Network<f64>;
pub type MlpF32 = nn::Network<f32>;
pub type Layer = nn::Dense<f64>;
pub type Grads = nn::Gradients<f64>;
pub type Label = nn::SoftLabel<f64>;
pub type Noise = smoothing::NoiseBatch<f64>;
pub type Data = data::Dataset<f64>;
pub type Optimizer = nn::OptimizerState<f64>;
