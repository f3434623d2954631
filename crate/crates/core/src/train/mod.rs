//! Optimization loop: voxel sampling, segmentation losses, self-supervised
//! heatmap training and Adam updates, with exact checkpoint/resume.

mod checkpoint;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cas::{build_target_heatmap, oversample_uniform, SampleOrigin, SampleSet};
use crate::cost::sample_count;
use crate::data::{augment, read_volume, znormalize, AugmentConfig, Coord, DatasetManifest, LabelVolume, Split, Volume};
use crate::error::{Error, Result};
use crate::interaction::{ce_loss, f1_loss};
use crate::model::{ModelConfig, SegmentationModel};
use crate::nn::{zero_grads, Adam, AdamConfig};
use crate::text::TextBank;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// Top-K of the CVAE heatmap plus uniform oversampling.
    #[default]
    Cas,
    /// The same number of voxels drawn uniformly.
    Random,
    /// Every voxel of the patch.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub optimizer: AdamConfig,
    pub sampling: SamplingStrategy,
    /// Fraction of patch voxels chosen by the sampler, `K = ceil(ratio * DHW)`.
    pub sample_ratio: f64,
    /// Extra uniform voxels as a multiple of `K`.
    pub oversample_factor: usize,
    pub patch_size: [usize; 3],
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Crop attempts before an all-background step is skipped.
    pub max_resample: usize,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            steps_per_epoch: 2,
            optimizer: AdamConfig::default(),
            sampling: SamplingStrategy::Cas,
            sample_ratio: 0.1,
            oversample_factor: 2,
            patch_size: [32, 32, 32],
            seed: 0,
            augment: AugmentConfig::default(),
            max_resample: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::InvalidConfig("train.sample_ratio must be in (0, 1]".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::InvalidConfig("train.optimizer.lr must be > 0".into()));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::InvalidConfig("train.steps_per_epoch must be >= 1".into()));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::InvalidConfig("train.patch_size must be positive".into()));
        }
        if self.max_resample == 0 {
            return Err(Error::InvalidConfig("train.max_resample must be >= 1".into()));
        }
        self.augment.validate()
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch
    }
}

/// Independent random streams per step and purpose, so any step can be replayed
/// from the seed alone.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Data = 0,
    HeatmapNoise = 1,
    Oversample = 2,
    LatentNoise = 3,
    Shuffle = 4,
    Init = 15,
}

pub fn stream_rng(seed: u64, index: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(16) + purpose as u64);
    rng
}

/// Per-step loss components (the F1 term is 0 when the sample has no foreground).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub ce: f64,
    pub f1: f64,
    pub mse: f64,
    pub kld: f64,
    pub total: f64,
}

/// `ce + f1 + mse + lambda * kld`, rejecting non-finite components by name.
pub fn total_loss(ce: f64, f1: f64, mse: f64, kld: f64, lambda: f64) -> Result<f64> {
    for (name, v) in [("ce", ce), ("f1", f1), ("mse", mse), ("kld", kld)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    Ok(ce + f1 + mse + lambda * kld)
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: LossRecord,
    pub samples: SampleSet,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: SegmentationModel<f32>,
    pub optimizer: Adam<f32>,
    pub config: TrainConfig,
    /// Number of completed (or skipped) steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, bank: &TextBank) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 0, Stream::Init);
        let model = SegmentationModel::new(model_config, bank, &mut rng)?;
        let optimizer = Adam::new(config.optimizer, &model);
        Ok(Self {
            model,
            optimizer,
            config,
            step: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.config.steps_per_epoch
    }

    fn choose_voxels(&self, image: &Array3<f32>, shape: [usize; 3]) -> Result<SampleSet> {
        let total: usize = shape.iter().product();
        let k = sample_count(total, self.config.sample_ratio);
        let extra = (self.config.oversample_factor * k).min(total - k);
        let mut set = SampleSet::default();
        let mut over_rng = stream_rng(self.config.seed, self.step, Stream::Oversample);
        let cold = self.epoch() == 0;
        match self.config.sampling {
            SamplingStrategy::None => {
                let all: Vec<Coord> = (0..shape[0])
                    .flat_map(|d| (0..shape[1]).flat_map(move |h| (0..shape[2]).map(move |w| [d, h, w])))
                    .collect();
                set.push_all(&all, SampleOrigin::Uniform);
            }
            SamplingStrategy::Cas if !cold => {
                let mut noise = stream_rng(self.config.seed, self.step, Stream::HeatmapNoise);
                let top = self.model.complexity_sample(image.view(), k, &mut noise)?;
                let over = oversample_uniform(shape, extra, &top, &mut over_rng)?;
                set.push_all(&top, SampleOrigin::Complexity);
                set.push_all(&over, SampleOrigin::Uniform);
            }
            _ => {
                let all = oversample_uniform(shape, k + extra, &[], &mut over_rng)?;
                set.push_all(&all, SampleOrigin::Uniform);
            }
        }
        Ok(set)
    }

    /// One optimization step on a single patch. Parameters are untouched when
    /// any loss component is non-finite.
    pub fn train_step(&mut self, image: &Volume, labels: &LabelVolume) -> Result<StepOutcome> {
        let shape = image.shape();
        if labels.shape() != shape {
            return Err(Error::ShapeMismatch(format!("labels {:?} vs image {shape:?}", labels.shape())));
        }
        if labels.num_classes() != self.model.num_classes() {
            return Err(Error::ClassCountMismatch {
                expected: self.model.num_classes(),
                found: labels.num_classes(),
            });
        }
        let img = image.data();
        zero_grads(&mut self.model);

        let (tokens, etape) = self.model.encode(img.view())?;
        let samples = self.choose_voxels(img, shape)?;
        let coords = &samples.coords;
        let targets: Vec<usize> = coords.iter().map(|&c| labels.get(c) as usize).collect();

        let rows = tokens.gather(coords)?;
        let (block, itape) = self.model.interact(rows.view(), None)?;
        let ce = ce_loss(&block, &targets)?;
        let mut dlogits = ce.grad_logits;
        let f1 = match f1_loss(&block, &targets, self.model.config().interaction.f1_aggregation) {
            Ok(f1) => {
                dlogits += &f1.grad_logits;
                f1.value
            }
            Err(Error::NoForeground) => 0.0,
            Err(e) => return Err(e),
        };
        let drows = self.model.interact_backward(&itape, dlogits.view());
        let dmap = crate::encoder::TokenStore::scatter_add(shape, coords, &drows);
        self.model.encoder.backward(&etape, &dmap);

        let (mse, kld) = if self.config.sampling == SamplingStrategy::Cas {
            let conf: Vec<f32> = targets.iter().enumerate().map(|(r, &y)| block.probs[(r, y)]).collect();
            let sigma = self.model.config().cas.smoothing_sigma;
            let target = if coords.len() >= 2 {
                build_target_heatmap(coords, &conf, shape, sigma)?
            } else {
                Array3::zeros(shape)
            };
            let mut zr = stream_rng(self.config.seed, self.step, Stream::LatentNoise);
            let z = self.model.cvae.draw_noise(shape, &mut zr);
            let out = self.model.cvae.fit_target(target.view(), img.view(), &z)?;
            (out.mse as f64, out.kld as f64)
        } else {
            (0.0, 0.0)
        };
        let lambda = self.model.config().cas.kl_weight;
        let total = total_loss(ce.value as f64, f1 as f64, mse, kld, lambda)?;
        self.optimizer.step(&mut self.model);
        let record = LossRecord {
            step: self.step,
            ce: ce.value as f64,
            f1: f1 as f64,
            mse,
            kld,
            total,
        };
        self.step += 1;
        Ok(StepOutcome { record, samples })
    }
}

/// Z-normalized training volumes with their labels.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<(Volume, LabelVolume)>> {
    manifest
        .entries(split)
        .map(|e| {
            let (v, l) = read_volume(manifest.resolve(e))?;
            let l = l.ok_or_else(|| Error::InvalidArgument(format!("{} has no labels", e.path.display())))?;
            if l.num_classes() != manifest.class_names.len() {
                return Err(Error::ClassCountMismatch {
                    expected: manifest.class_names.len(),
                    found: l.num_classes(),
                });
            }
            Ok((znormalize(&v)?, l))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Directory for periodic and last-good checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON-lines loss curve.
    pub loss_log: Option<PathBuf>,
    /// Stop after this many steps in this call (for resume tests).
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub records: Vec<LossRecord>,
    pub skipped_steps: Vec<u64>,
}

fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.vckpt"))
}

/// Runs the remaining steps of the configured schedule over `data`.
pub fn fit(trainer: &mut Trainer, data: &[(Volume, LabelVolume)], opts: &FitOptions) -> Result<FitReport> {
    let cfg = trainer.config.clone();
    let mut report = FitReport::default();
    if cfg.total_steps() > trainer.step && data.is_empty() {
        return Err(Error::InvalidArgument("no training volumes".into()));
    }
    let mut log = match &opts.loss_log {
        Some(p) => Some(BufWriter::new(File::options().create(true).append(true).open(p)?)),
        None => None,
    };
    let mut aug = cfg.augment.clone();
    aug.patch_size = Some(cfg.patch_size);
    let mut ran = 0;
    while trainer.step < cfg.total_steps() && opts.max_steps.is_none_or(|m| ran < m) {
        ran += 1;
        let epoch = trainer.epoch();
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream_rng(cfg.seed, epoch, Stream::Shuffle));
        let (v, l) = &data[order[(trainer.step % cfg.steps_per_epoch) as usize % data.len()]];
        let mut rng = stream_rng(cfg.seed, trainer.step, Stream::Data);
        let mut patch = None;
        for _ in 0..cfg.max_resample {
            let (pv, pl) = augment(v, l, rng.next_u64(), &aug)?;
            if pl.has_foreground() {
                patch = Some((pv, pl));
                break;
            }
        }
        let Some((pv, pl)) = patch else {
            log::warn!("step {}: no foreground after {} crops, skipping", trainer.step, cfg.max_resample);
            report.skipped_steps.push(trainer.step);
            trainer.step += 1;
            continue;
        };
        let outcome = match trainer.train_step(&pv, &pl) {
            Ok(o) => o,
            Err(e) => {
                if let Some(dir) = &opts.checkpoint_dir {
                    save_checkpoint(trainer, checkpoint_path(dir, "last-good"))?;
                }
                return Err(e);
            }
        };
        if let Some(w) = &mut log {
            serde_json::to_writer(&mut *w, &outcome.record)?;
            w.write_all(b"\n")?;
        }
        report.records.push(outcome.record);
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && trainer.step.is_multiple_of(cfg.checkpoint_every) {
                save_checkpoint(trainer, checkpoint_path(dir, &format!("step-{:06}", trainer.step)))?;
            }
        }
    }
    if let Some(w) = &mut log {
        w.flush()?;
    }
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(trainer, checkpoint_path(dir, "final"))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
