use ndarray::{Array3, Axis};

use crate::data::{linear_index, Coord};
use crate::error::{Error, Result};
use crate::real::Real;

/// Dense map with value `1 - r/(n-1)` at the voxel of confidence rank `r`
/// (ascending confidence, ties by coordinate order), zero elsewhere, then
/// Gaussian-smoothed and clamped to `[0, 1]`. `sigma == 0` skips smoothing.
pub fn build_target_heatmap<T: Real>(
    coords: &[Coord],
    confidences: &[T],
    shape: [usize; 3],
    sigma: f64,
) -> Result<Array3<T>> {
    if coords.len() != confidences.len() {
        return Err(Error::DimensionMismatch {
            what: "confidence count",
            expected: coords.len(),
            found: confidences.len(),
        });
    }
    if coords.len() < 2 {
        return Err(Error::InvalidArgument("target heatmap needs at least 2 voxels".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument("smoothing sigma must be >= 0".into()));
    }
    let total: usize = shape.iter().product();
    let mut seen = vec![false; total];
    let mut order: Vec<(usize, f64)> = Vec::with_capacity(coords.len());
    for (&c, &conf) in coords.iter().zip(confidences) {
        if c.iter().zip(&shape).any(|(a, n)| a >= n) {
            return Err(Error::OutOfBounds { coord: c, shape });
        }
        let idx = linear_index(shape, c);
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::DuplicateCoordinate(c));
        }
        let conf = conf.as_f64();
        if !conf.is_finite() {
            return Err(Error::NonFinite("confidences".into()));
        }
        order.push((idx, conf));
    }
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let n = order.len() as f64;
    let mut dense = vec![0.0f64; total];
    for (r, &(idx, _)) in order.iter().enumerate() {
        dense[idx] = 1.0 - r as f64 / (n - 1.0);
    }
    let mut map = Array3::from_shape_vec(shape, dense).expect("shape");
    if sigma > 0.0 {
        map = gaussian_smooth(&map, sigma);
    }
    Ok(map.mapv(|v| T::lit(v.clamp(0.0, 1.0))))
}

/// Separable Gaussian filter truncated at `ceil(3 sigma)`, weights renormalized
/// over the taps that fall inside the volume.
pub fn gaussian_smooth(map: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut cur = map.clone();
    for axis in 0..3 {
        let mut out = Array3::<f64>::zeros(cur.raw_dim());
        let n = cur.len_of(Axis(axis)) as isize;
        for (src, mut dst) in cur.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
            for i in 0..n {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (t, &w) in kernel.iter().enumerate() {
                    let j = i + t as isize - radius;
                    if (0..n).contains(&j) {
                        acc += w * src[j as usize];
                        wsum += w;
                    }
                }
                dst[i as usize] = acc / wsum;
            }
        }
        cur = out;
    }
    cur
}
