//! Voxel-language segmentation of volumetric images.
//!
//! Voxels are embedded by a residual convolutional encoder with a feature-pyramid
//! neck, projected to a small shared space and classified by cosine similarity to
//! class-prompt embeddings. Training concentrates on hard voxels through a
//! conditional VAE that predicts a per-voxel complexity heatmap.

pub mod ablation;
pub mod cas;
pub mod config;
pub mod cost;
pub mod data;
pub mod encoder;
pub mod error;
pub mod infer;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod real;
pub mod selftest;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
