//! Conditional any-resolution GAN laboratory.
//!
//! The crate covers the whole pipeline at desk scale: dataset manifests and
//! patch sampling ([`data`]), a coordinate-conditioned style generator and a
//! projection discriminator ([`model`]), two-stage training with teacher
//! consistency ([`train`]), FID / patch-FID ([`metrics`]) and the synthetic
//! augmentation study ([`augment`]).

pub mod augment;
pub mod autograd;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
