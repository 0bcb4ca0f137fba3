//! Phase/amplitude disentangled early stopping for learning with noisy labels.
//!
//! The crate bundles a small reverse-mode autograd engine, a differentiable
//! spectral gate that can cut either the amplitude or the phase spectrum of an
//! intermediate feature out of the backward pass, synthetic label-noise
//! generators, segmented toy models and the staged training schedule built on
//! top of them.

pub mod autograd;
pub mod data;
pub mod error;
pub mod model;
pub mod noise;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod rng;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
