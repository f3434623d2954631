//! Quadratic all-pairs reference for the mask metrics. Shares no code with the
//! distance-transform path so it can serve as an independent check.

use ndarray::Array3;

use super::MetricOptions;

fn boundary(mask: &Array3<bool>) -> Vec<[usize; 3]> {
    let (d, h, w) = mask.dim();
    let dims = [d, h, w];
    let mut out = Vec::new();
    for ((z, y, x), &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        let p = [z, y, x];
        let exposed = (0..3).any(|a| {
            let mut lo = p;
            let mut hi = p;
            let lo_out = p[a] == 0 || {
                lo[a] -= 1;
                !mask[lo]
            };
            let hi_out = p[a] + 1 == dims[a] || {
                hi[a] += 1;
                !mask[hi]
            };
            lo_out || hi_out
        });
        if exposed {
            out.push(p);
        }
    }
    out
}

fn nearest(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    let mut s = 0.0;
                    for i in 0..3 {
                        let t = (a[i] as f64 - b[i] as f64) * spacing[i];
                        s += t * t;
                    }
                    s.sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// `(dice, nsd, hd)` by exhaustive surface-pair search; `None` when both masks
/// are empty.
pub fn brute_force_mask_metrics(
    pred: &Array3<bool>,
    gt: &Array3<bool>,
    spacing: [f64; 3],
    opts: &MetricOptions,
) -> Option<(f64, f64, f64)> {
    let np = pred.iter().filter(|&&v| v).count();
    let ng = gt.iter().filter(|&&v| v).count();
    if np == 0 && ng == 0 {
        return None;
    }
    if np == 0 || ng == 0 {
        let (d, h, w) = pred.dim();
        let diag = ((d as f64 * spacing[0]).powi(2) + (h as f64 * spacing[1]).powi(2) + (w as f64 * spacing[2]).powi(2)).sqrt();
        return Some((0.0, 0.0, diag));
    }
    let both = pred.iter().zip(gt.iter()).filter(|(a, b)| **a && **b).count();
    let dice = 2.0 * both as f64 / (np + ng) as f64;
    let bp = boundary(pred);
    let bg = boundary(gt);
    let mut all = nearest(&bp, &bg, spacing);
    all.extend(nearest(&bg, &bp, spacing));
    let tol = opts.nsd_tolerance * spacing[0].min(spacing[1]).min(spacing[2]);
    let nsd = all.iter().filter(|&&x| x <= tol).count() as f64 / all.len() as f64;
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let pos = opts.hd_percentile / 100.0 * (all.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let hd = all[lo] + (all[hi] - all[lo]) * (pos - lo as f64);
    Some((dice, nsd, hd))
}
