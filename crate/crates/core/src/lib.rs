//! Dual arbitrary-scale multi-contrast MRI super-resolution.
//!
//! A shared-weight residual dense encoder turns a low-resolution target slice
//! and a reference slice of another contrast (at any resolution) into latent
//! features, aligns both to the requested output grid with nearest
//! upsampling, fuses them with attention residual blocks, and decodes every
//! output pixel independently with a feature-modulated sine network.

pub mod checkpoint;
pub mod curriculum;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod kspace;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod render;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
