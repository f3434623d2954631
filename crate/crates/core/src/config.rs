//! Structured run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cas::CvaeConfig;
use crate::data::{Adjacency, SyntheticDataset};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::infer::InferenceConfig;
use crate::interaction::{HeadKind, InteractionConfig};
use crate::metrics::MetricOptions;
use crate::model::ModelConfig;
use crate::text::{build_prompts, Provider, TextBank};
use crate::train::{SamplingStrategy, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Phantom grid `D x H x W`.
    pub shape: [usize; 3],
    pub foreground_classes: usize,
    pub train_volumes: usize,
    pub test_volumes: usize,
    /// Volume `i` is generated from `seed + i`.
    pub seed: u64,
    /// Precomputed VEMB embedding table; synthetic embeddings when absent.
    pub embeddings: Option<PathBuf>,
    pub embedding_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = SyntheticDataset::default();
        Self {
            shape: d.shape,
            foreground_classes: d.foreground_classes,
            train_volumes: d.train_volumes,
            test_volumes: d.test_volumes,
            seed: d.seed,
            embeddings: None,
            embedding_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn dataset(&self) -> SyntheticDataset {
        SyntheticDataset {
            shape: self.shape,
            foreground_classes: self.foreground_classes,
            train_volumes: self.train_volumes,
            test_volumes: self.test_volumes,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub patch_size: [usize; 3],
    pub overlap: f64,
    pub nsd_tolerance: f64,
    pub hd_percentile: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let i = InferenceConfig::default();
        let m = MetricOptions::default();
        Self {
            patch_size: i.patch_size,
            overlap: i.overlap,
            nsd_tolerance: m.nsd_tolerance,
            hd_percentile: m.hd_percentile,
        }
    }
}

impl EvalConfig {
    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            patch_size: self.patch_size,
            overlap: self.overlap,
        }
    }

    pub fn metrics(&self) -> MetricOptions {
        MetricOptions {
            nsd_tolerance: self.nsd_tolerance,
            hd_percentile: self.hd_percentile,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.inference().validate()?;
        if !(self.nsd_tolerance >= 0.0 && self.nsd_tolerance.is_finite()) {
            return Err(Error::InvalidConfig("eval.nsd_tolerance must be >= 0".into()));
        }
        if !(0.0..=100.0).contains(&self.hd_percentile) {
            return Err(Error::InvalidConfig("eval.hd_percentile must be in [0, 100]".into()));
        }
        Ok(())
    }
}

/// Ablation grid. `none` cells ignore `ratios` and run once per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub strategies: Vec<SamplingStrategy>,
    pub ratios: Vec<f64>,
    pub heads: Vec<HeadKind>,
    /// Training steps per cell; overrides `train.epochs`.
    pub steps: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            strategies: vec![SamplingStrategy::Cas, SamplingStrategy::Random, SamplingStrategy::None],
            ratios: vec![0.1],
            heads: vec![HeadKind::Cosine],
            steps: 300,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.heads.is_empty() {
            return Err(Error::InvalidConfig("bench grid needs a strategy and a head".into()));
        }
        if self.ratios.is_empty() && self.strategies.iter().any(|s| *s != SamplingStrategy::None) {
            return Err(Error::InvalidConfig("bench.ratios is empty".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::InvalidConfig(format!("bench ratio {r} outside (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub interaction: InteractionConfig,
    pub cas: CvaeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.dataset().validate()?;
        self.model().validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.bench.validate()
    }

    /// Canonical TOML text of the resolved configuration.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            interaction: self.interaction.clone(),
            cas: self.cas.clone(),
        }
    }

    /// Builds the frozen text bank for `class_names`, from the configured
    /// embedding file or synthesized at the encoder's token width.
    pub fn text_bank(&self, class_names: &[String], adjacency: &Adjacency) -> Result<TextBank> {
        let prompts = build_prompts(class_names, adjacency)?;
        let dim = self.encoder.token_dim;
        match &self.data.embeddings {
            Some(p) => TextBank::embed(&prompts, Provider::File(p.clone()), dim),
            None => TextBank::synthetic(&prompts, dim, self.data.embedding_seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn snapshot_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.train.sampling = SamplingStrategy::Random;
        cfg.interaction.head = HeadKind::Linear;
        cfg.data.embeddings = Some("emb.vemb".into());
        assert_eq!(RunConfig::from_toml(&cfg.snapshot()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nepocs = 3\n").is_err());
        assert!(RunConfig::from_toml("[solver]\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[train]\nsample_ratio = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[eval]\noverlap = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[bench]\nratios = [1.5]\n").is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let e = RunConfig::load("/nonexistent/run.toml").unwrap_err().to_string();
        assert!(e.contains("/nonexistent/run.toml"));
    }
}
