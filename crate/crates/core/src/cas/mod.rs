//! Complexity-aware voxel sampling: target heatmaps built from per-voxel
//! confidence ranks, a conditional VAE that learns to predict them, and the
//! top-K plus uniform oversampling that selects training voxels.

mod cvae;
mod heatmap;
mod sampling;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cvae::{cas_losses, reparameterize, CasLosses, Cvae, CvaeStep, DecodeTape, EncodeTape, LatentField, LOG_SIGMA_RANGE};
pub use heatmap::{build_target_heatmap, gaussian_smooth};
pub use sampling::{band_concentration, boundary_band, oversample_uniform, sample_topk, SampleOrigin, SampleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    /// Latent components per voxel.
    pub latent_components: usize,
    /// Hidden widths of the encoder (and, reversed, the decoder).
    pub widths: [usize; 2],
    pub kl_weight: f64,
    /// Gaussian smoothing of the target heatmap, in voxels.
    pub smoothing_sigma: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            latent_components: 4,
            widths: [8, 16],
            kl_weight: 1e-3,
            smoothing_sigma: 2.0,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_components == 0 {
            return Err(Error::InvalidConfig("cas.latent_components must be >= 1".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("cas.widths must be positive".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::InvalidConfig("cas.kl_weight must be >= 0".into()));
        }
        if !(self.smoothing_sigma > 0.0 && self.smoothing_sigma.is_finite()) {
            return Err(Error::InvalidConfig("cas.smoothing_sigma must be > 0".into()));
        }
        Ok(())
    }
}
