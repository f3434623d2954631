//! Whole-volume prediction by overlapping windows, and dataset evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{read_volume, znormalize, DatasetManifest, LabelVolume, Split, Volume};
use crate::error::{Error, Result};
use crate::metrics::{segmentation_metrics, MetricOptions, MetricsReport};
use crate::model::SegmentationModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub patch_size: [usize; 3],
    /// Fractional overlap of neighbouring windows, in `[0, 1)`.
    pub overlap: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            patch_size: [32, 32, 32],
            overlap: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidConfig("overlap must be in [0, 1)".into()));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::InvalidConfig("patch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PredictionVolume {
    pub labels: LabelVolume,
    /// Window-averaged logits, `(classes, D, H, W)`.
    pub scores: Array4<f32>,
}

/// Window start offsets along one axis: a regular grid plus a final window
/// flush with the end.
pub fn window_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

fn pad_edge(v: &Array3<f32>, shape: [usize; 3]) -> Array3<f32> {
    let (d, h, w) = v.dim();
    Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| v[[i.min(d - 1), j.min(h - 1), k.min(w - 1)]])
}

pub fn sliding_window_predict(model: &SegmentationModel<f32>, volume: &Volume, cfg: &InferenceConfig) -> Result<PredictionVolume> {
    cfg.validate()?;
    model.config().encoder.check_shape(cfg.patch_size)?;
    let shape = volume.shape();
    let padded_shape: [usize; 3] = std::array::from_fn(|a| shape[a].max(cfg.patch_size[a]));
    let image = pad_edge(volume.data(), padded_shape);
    let p = cfg.patch_size;
    let stride: [usize; 3] = std::array::from_fn(|a| ((p[a] as f64 * (1.0 - cfg.overlap)).floor() as usize).max(1));
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(padded_shape[a], p[a], stride[a])).collect();
    let n = model.num_classes();
    let mut sum = Array4::<f32>::zeros((n, padded_shape[0], padded_shape[1], padded_shape[2]));
    let mut count = Array3::<f32>::zeros((padded_shape[0], padded_shape[1], padded_shape[2]));
    for &i in &starts[0] {
        for &j in &starts[1] {
            for &k in &starts[2] {
                let window = s![i..i + p[0], j..j + p[1], k..k + p[2]];
                let logits = model.predict_logits(image.slice(window))?;
                let block = logits
                    .t()
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, p[0], p[1], p[2]))
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                sum.slice_mut(s![.., i..i + p[0], j..j + p[1], k..k + p[2]]).zip_mut_with(&block, |a, &b| *a += b);
                count.slice_mut(window).mapv_inplace(|c| c + 1.0);
            }
        }
    }
    let crop = s![.., ..shape[0], ..shape[1], ..shape[2]];
    let mut scores = sum.slice(crop).to_owned();
    let count = count.slice(s![..shape[0], ..shape[1], ..shape[2]]).to_owned();
    for mut plane in scores.axis_iter_mut(Axis(0)) {
        plane /= &count;
    }
    let labels = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| {
        let mut best = 0;
        for c in 1..n {
            if scores[[c, i, j, k]] > scores[[best, i, j, k]] {
                best = c;
            }
        }
        best as u16
    });
    Ok(PredictionVolume {
        labels: LabelVolume::new(labels, n)?,
        scores,
    })
}

/// Dataset class name to model class name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMapping {
    pub classes: BTreeMap<String, String>,
}

impl ClassMapping {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Serde(e.to_string()))
    }

    /// For every dataset class, the model class index it is scored against.
    /// Without an entry, names are matched literally.
    pub fn resolve(&self, dataset: &[String], model: &[String]) -> Result<Vec<usize>> {
        if let Some(bad) = self.classes.keys().find(|k| !dataset.contains(k)) {
            return Err(Error::UnmappableClass(bad.clone()));
        }
        dataset
            .iter()
            .enumerate()
            .map(|(i, name)| {
                if i == 0 {
                    return Ok(0);
                }
                let target = self.classes.get(name).unwrap_or(name);
                model
                    .iter()
                    .position(|m| m == target)
                    .ok_or_else(|| Error::UnmappableClass(name.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub reports: Vec<MetricsReport>,
    /// Mean over volumes of each volume's mean; `None` without volumes.
    pub mean_dice: Option<f64>,
    pub mean_nsd: Option<f64>,
    pub mean_hd95: Option<f64>,
}

impl EvaluationSummary {
    pub fn from_reports(reports: Vec<MetricsReport>) -> Self {
        let avg = |f: fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            mean_dice: avg(|r| r.mean_dice),
            mean_nsd: avg(|r| r.mean_nsd),
            mean_hd95: avg(|r| r.mean_hd95),
            reports,
        }
    }
}

/// Predicts every volume of `split`, maps the prediction into the dataset's class
/// space and scores only the mapped classes.
pub fn evaluate(
    model: &SegmentationModel<f32>,
    manifest: &DatasetManifest,
    split: Split,
    mapping: &ClassMapping,
    infer: &InferenceConfig,
    metrics: &MetricOptions,
) -> Result<EvaluationSummary> {
    let index = mapping.resolve(&manifest.class_names, model.class_names())?;
    let mut reports = Vec::new();
    for entry in manifest.entries(split) {
        let (v, gt) = read_volume(manifest.resolve(entry))?;
        let gt = gt.ok_or_else(|| Error::InvalidArgument(format!("{} has no labels", entry.path.display())))?;
        let pred = sliding_window_predict(model, &znormalize(&v)?, infer)?;
        let mapped = pred.labels.labels().mapv(|m| {
            index
                .iter()
                .skip(1)
                .position(|&x| x == m as usize)
                .map_or(0, |p| (p + 1) as u16)
        });
        let mapped = LabelVolume::new(mapped, manifest.class_names.len())?;
        reports.push(segmentation_metrics(
            &entry.path.display().to_string(),
            &mapped,
            &gt,
            v.spacing(),
            &manifest.class_names,
            metrics,
        )?);
    }
    Ok(EvaluationSummary::from_reports(reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Adjacency;
    use crate::model::ModelConfig;
    use crate::text::{build_prompts, TextBank};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> SegmentationModel<f32> {
        let mut cfg = ModelConfig::default();
        cfg.encoder.stage_widths = vec![4, 4];
        cfg.encoder.stem_channels = 4;
        cfg.encoder.blocks_per_stage = 1;
        cfg.encoder.token_dim = 8;
        cfg.encoder.projected_dim = 4;
        let names: Vec<String> = ["background", "a", "b"].iter().map(|s| s.to_string()).collect();
        let bank = TextBank::synthetic(&build_prompts(&names, &Adjacency::empty(3)).unwrap(), 8, 1).unwrap();
        SegmentationModel::new(cfg, &bank, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn window_grid_covers_volume() {
        assert_eq!(window_starts(12, 8, 4), vec![0, 4]);
        assert_eq!(window_starts(13, 8, 4), vec![0, 4, 5]);
        assert_eq!(window_starts(8, 8, 4), vec![0]);
        let mut cover = [0; 12];
        for s in window_starts(12, 8, 4) {
            cover[s..s + 8].iter_mut().for_each(|c| *c += 1);
        }
        assert!(cover.iter().all(|&c| c >= 1));
    }

    #[test]
    fn single_window_equals_direct_forward() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array3::from_shape_simple_fn((8, 8, 8), || rand::Rng::random_range(&mut rng, -1.0f32..1.0));
        let v = Volume::new(data.clone(), [1.0; 3]).unwrap();
        let cfg = InferenceConfig {
            patch_size: [8, 8, 8],
            overlap: 0.5,
        };
        let pred = sliding_window_predict(&m, &v, &cfg).unwrap();
        let logits = m.predict_logits(data.view()).unwrap();
        for (r, row) in logits.rows().into_iter().enumerate() {
            let c = [r / 64, (r / 8) % 8, r % 8];
            for k in 0..3 {
                assert_eq!(pred.scores[[k, c[0], c[1], c[2]]], row[k]);
            }
        }
    }

    #[test]
    fn padding_and_overlap_produce_full_shape() {
        let m = model();
        let v = Volume::new(Array3::from_shape_fn((6, 12, 13), |(i, j, k)| (i + j + k) as f32 * 0.1), [1.0; 3]).unwrap();
        let cfg = InferenceConfig {
            patch_size: [8, 8, 8],
            overlap: 0.5,
        };
        let pred = sliding_window_predict(&m, &v, &cfg).unwrap();
        assert_eq!(pred.labels.shape(), [6, 12, 13]);
        assert!(pred.scores.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn class_mapping_resolution() {
        let ds: Vec<String> = ["background", "liver", "kidney"].iter().map(|s| s.to_string()).collect();
        let md: Vec<String> = ["background", "kidney_r", "liver"].iter().map(|s| s.to_string()).collect();
        let mut map = ClassMapping::default();
        map.classes.insert("kidney".into(), "kidney_r".into());
        assert_eq!(map.resolve(&ds, &md).unwrap(), vec![0, 2, 1]);
        map.classes.insert("spleen".into(), "liver".into());
        let err = map.resolve(&ds, &md).unwrap_err();
        assert!(err.to_string().contains("spleen"));
        let err = ClassMapping::default().resolve(&ds, &md).unwrap_err();
        assert!(err.to_string().contains("kidney"));
    }
}
