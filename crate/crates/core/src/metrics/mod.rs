//! Overlap and surface metrics for label volumes.

mod distance;
mod oracle;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::LabelVolume;
use crate::error::{Error, Result};

pub use distance::{squared_distance_transform, surface_voxels};
pub use oracle::brute_force_mask_metrics;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// Surface-distance tolerance in voxels (scaled by the smallest spacing).
    pub nsd_tolerance: f64,
    /// Percentile of the pooled surface distances.
    pub hd_percentile: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            nsd_tolerance: 1.0,
            hd_percentile: 95.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub dice: f64,
    pub nsd: f64,
    pub hd95: f64,
    /// Whether the class occurs in the ground truth (only those enter the means).
    pub in_ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub volume: String,
    pub classes: Vec<ClassMetrics>,
    pub mean_dice: Option<f64>,
    pub mean_nsd: Option<f64>,
    pub mean_hd95: Option<f64>,
}

impl MetricsReport {
    fn finish(volume: String, classes: Vec<ClassMetrics>) -> Self {
        let present: Vec<&ClassMetrics> = classes.iter().filter(|c| c.in_ground_truth).collect();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            (!present.is_empty()).then(|| present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64)
        };
        Self {
            mean_dice: mean(|c| c.dice),
            mean_nsd: mean(|c| c.nsd),
            mean_hd95: mean(|c| c.hd95),
            volume,
            classes,
        }
    }
}

/// `q`-th percentile (0..=100) with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn dice(pred: &Array3<bool>, gt: &Array3<bool>) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (p + g) as f64
}

/// Distances from each surface voxel of `a` to the surface of `b`, followed by
/// those from `b` to `a`.
fn pooled_surface_distances(a: &Array3<bool>, b: &Array3<bool>, spacing: [f64; 3]) -> Vec<f64> {
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    let mut fa = Array3::from_elem(a.raw_dim(), false);
    let mut fb = Array3::from_elem(a.raw_dim(), false);
    sa.iter().for_each(|&c| fa[c] = true);
    sb.iter().for_each(|&c| fb[c] = true);
    let to_b = squared_distance_transform(&fb, spacing);
    let to_a = squared_distance_transform(&fa, spacing);
    sa.iter()
        .map(|&c| to_b[c].sqrt())
        .chain(sb.iter().map(|&c| to_a[c].sqrt()))
        .collect()
}

/// Length of the volume diagonal in physical units.
pub fn volume_diagonal(shape: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3).map(|a| (shape[a] as f64 * spacing[a]).powi(2)).sum::<f64>().sqrt()
}

/// Dice, NSD and HD95 for a single pair of binary masks. `None` when both are empty.
pub fn mask_metrics(pred: &Array3<bool>, gt: &Array3<bool>, spacing: [f64; 3], opts: &MetricOptions) -> Option<(f64, f64, f64)> {
    let has_p = pred.iter().any(|&b| b);
    let has_g = gt.iter().any(|&b| b);
    match (has_p, has_g) {
        (false, false) => None,
        (true, false) | (false, true) => {
            let (d, h, w) = pred.dim();
            Some((0.0, 0.0, volume_diagonal([d, h, w], spacing)))
        }
        (true, true) => {
            let mut dist = pooled_surface_distances(pred, gt, spacing);
            let tol = opts.nsd_tolerance * spacing.iter().cloned().fold(f64::INFINITY, f64::min);
            let nsd = dist.iter().filter(|&&x| x <= tol).count() as f64 / dist.len() as f64;
            dist.sort_by(f64::total_cmp);
            Some((dice(pred, gt), nsd, percentile(&dist, opts.hd_percentile)))
        }
    }
}

/// Per-class metrics for every foreground class occurring in either volume.
pub fn segmentation_metrics(
    volume: &str,
    pred: &LabelVolume,
    gt: &LabelVolume,
    spacing: [f64; 3],
    class_names: &[String],
    opts: &MetricOptions,
) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let n = gt.num_classes().max(pred.num_classes());
    let mut classes = Vec::new();
    for c in 1..n {
        let p = pred.labels().mapv(|l| l as usize == c);
        let g = gt.labels().mapv(|l| l as usize == c);
        if let Some((dice, nsd, hd95)) = mask_metrics(&p, &g, spacing, opts) {
            classes.push(ClassMetrics {
                class: c,
                name: class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
                dice,
                nsd,
                hd95,
                in_ground_truth: g.iter().any(|&b| b),
            });
        }
    }
    Ok(MetricsReport::finish(volume.to_string(), classes))
}
