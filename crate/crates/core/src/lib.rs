//! Environment-conditioned diffusion for satellite-like imagery.
//!
//! The crate bundles everything needed to run the conditioning experiments on
//! a desk: metadata embeddings and fusion, a small conditional denoiser with
//! DDIM sampling, a frame-wise temporal control branch, the image to
//! climate-grid alignment pipeline, a procedural world that produces matching
//! images and grids, and evaluation metrics.

pub mod caption;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod image;
pub mod metadata;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod temporal;
pub mod world;

pub use error::{Error, Result};
