//! Train autoregressive token policies to sample in proportion to an
//! unnormalized, KL-shaped reward density, on synthetic tasks small enough to
//! check every distributional claim by exhaustive enumeration.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common instantiations.

pub mod diagnostics;
pub mod env;
mod error;
pub mod experiment;
pub mod nn;
pub mod objectives;
mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{log_sum_exp, Scalar};

/// Network used for training runs and checkpoints.
pub type Model32 = nn::Model<f32>;
/// Double-precision network, used by gradient checks.
pub type Model64 = nn::Model<f64>;
pub type TabularModel64 = nn::TabularModel<f64>;
pub type TrainState32 = training::TrainState<f32>;
