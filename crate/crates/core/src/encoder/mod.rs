//! Voxel encoder: residual conv backbone, feature-pyramid neck, token projection.

mod backbone;
mod projection;
mod tokens;

pub use backbone::{EncoderConfig, EncoderTape, VoxelEncoder};
pub use projection::{Projection, ProjectionTape};
pub use tokens::TokenStore;
