//! Laser speckle flow imaging from few frames.
//!
//! Stage 1 registers a raw speckle sequence by phase correlation and turns it
//! into a temporal contrast map and an inverse-square flow prior. Stage 2 is a
//! conditional diffusion model that reconstructs a long-sequence quality flow
//! map from a handful of aligned frames plus that prior. Synthetic phantoms
//! with known ground truth drive both stages end to end.

pub mod contrast;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod phantom;
pub mod real;
pub mod register;
pub mod rng;

pub use error::{Error, Result};
