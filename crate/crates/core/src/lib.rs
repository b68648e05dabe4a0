//! Step-level process reward models on synthetic reasoning tasks.
//!
//! The pipeline: [`env`] generates problems and sampled reasoning traces,
//! [`annotate`] labels steps by Monte Carlo rollouts with bisection and an
//! annotator ensemble, [`prm`] trains a small step scorer, [`search`] spends a
//! generation budget under the scorer's guidance, [`similarity`] compares
//! gradient activation patterns, and [`harness`] ties it all together.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`.

pub mod annotate;
pub mod env;
pub mod error;
pub mod harness;
pub mod prm;
pub mod scalar;
pub mod search;
pub mod seed;
pub mod similarity;
pub mod trace;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PrmModel = prm::Model<f64>;
pub type PrmModelF32 = prm::Model<f32>;
pub type ActivationVector = similarity::ActivationVector<f64>;
