//! Unpaired two-domain image translation built around a one-step latent
//! diffusion generator: low-rank adapters and zero-initialized skip
//! connections over a frozen backbone, multi-scale feature fusion in the
//! encoder, a frozen-backbone adversarial critic, cycle-consistent training,
//! a whole-slide patch pipeline, and FID/KID evaluation.
//!
//! Core math is generic over the scalar type (`f32`/`f64`); see the aliases
//! at the crate root for the common concrete instantiations.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod mff;
pub mod perceptual;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use ndarray;

pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Param32 = tensor::Param<f32>;
pub type Param64 = tensor::Param<f64>;
