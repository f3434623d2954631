use ndarray::{Array3, ArrayView3};
use rand::Rng;

use crate::data::{linear_index, Coord};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleOrigin {
    Complexity,
    Uniform,
}

/// Training voxels together with where each one came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub coords: Vec<Coord>,
    pub origins: Vec<SampleOrigin>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn push_all(&mut self, coords: &[Coord], origin: SampleOrigin) {
        self.coords.extend_from_slice(coords);
        self.origins.extend(std::iter::repeat_n(origin, coords.len()));
    }

    pub fn complexity_coords(&self) -> impl Iterator<Item = &Coord> {
        self.coords
            .iter()
            .zip(&self.origins)
            .filter(|(_, &o)| o == SampleOrigin::Complexity)
            .map(|(c, _)| c)
    }
}

pub(crate) fn coord_of(shape: [usize; 3], idx: usize) -> Coord {
    let hw = shape[1] * shape[2];
    [idx / hw, (idx % hw) / shape[2], idx % shape[2]]
}

/// The `k` highest-valued voxels in descending order; equal values keep coordinate order.
pub fn sample_topk<T: Real>(heatmap: ArrayView3<'_, T>, k: usize) -> Result<Vec<Coord>> {
    let (d, h, w) = heatmap.dim();
    let total = d * h * w;
    if k == 0 || k > total {
        return Err(Error::InfeasibleSample(format!("k = {k} outside 1..={total}")));
    }
    let values: Vec<T> = heatmap.iter().cloned().collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap".into()));
    }
    let mut idx: Vec<usize> = (0..total).collect();
    let cmp = |a: &usize, b: &usize| {
        values[*b]
            .partial_cmp(&values[*a])
            .expect("finite")
            .then(a.cmp(b))
    };
    if k < total {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx.into_iter().map(|i| coord_of([d, h, w], i)).collect())
}

/// `count` distinct voxels drawn uniformly without replacement from outside `exclude`.
pub fn oversample_uniform<R: Rng + ?Sized>(
    shape: [usize; 3],
    count: usize,
    exclude: &[Coord],
    rng: &mut R,
) -> Result<Vec<Coord>> {
    let total: usize = shape.iter().product();
    let mut excluded = vec![false; total];
    for &c in exclude {
        if c.iter().zip(&shape).any(|(a, n)| a >= n) {
            return Err(Error::OutOfBounds { coord: c, shape });
        }
        excluded[linear_index(shape, c)] = true;
    }
    let pool: Vec<usize> = (0..total).filter(|&i| !excluded[i]).collect();
    if count > pool.len() {
        return Err(Error::InfeasibleSample(format!(
            "{count} voxels requested but only {} available",
            pool.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| coord_of(shape, pool[i]))
        .collect())
}

/// Voxels within Euclidean distance `radius` (in voxels) of a label boundary.
/// A boundary voxel has a face neighbour with a different label.
pub fn boundary_band(labels: ArrayView3<'_, u16>, radius: f64) -> Array3<bool> {
    let (d, h, w) = labels.dim();
    let mut edge = Array3::from_elem((d, h, w), false);
    for ((z, y, x), &l) in labels.indexed_iter() {
        let differs = |dz: isize, dy: isize, dx: isize| {
            let (a, b, c) = (z as isize + dz, y as isize + dy, x as isize + dx);
            a >= 0 && b >= 0 && c >= 0
                && (a as usize) < d && (b as usize) < h && (c as usize) < w
                && labels[[a as usize, b as usize, c as usize]] != l
        };
        edge[[z, y, x]] = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
            .iter()
            .any(|&(a, b, c)| differs(a, b, c));
    }
    let r = radius.floor() as isize;
    let offsets: Vec<[isize; 3]> = (-r..=r)
        .flat_map(|a| (-r..=r).flat_map(move |b| (-r..=r).map(move |c| [a, b, c])))
        .filter(|o| ((o[0] * o[0] + o[1] * o[1] + o[2] * o[2]) as f64) <= radius * radius)
        .collect();
    let mut band = Array3::from_elem((d, h, w), false);
    for ((z, y, x), _) in edge.indexed_iter().filter(|(_, &e)| e) {
        for o in &offsets {
            let (a, b, c) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
            if a >= 0 && b >= 0 && c >= 0 && (a as usize) < d && (b as usize) < h && (c as usize) < w {
                band[[a as usize, b as usize, c as usize]] = true;
            }
        }
    }
    band
}

/// Fraction of `coords` inside `band`, divided by the fraction of all voxels
/// inside it (the expectation for uniformly drawn voxels).
pub fn band_concentration(band: &Array3<bool>, coords: &[Coord]) -> Option<f64> {
    let inside = band.iter().filter(|&&b| b).count();
    if coords.is_empty() || inside == 0 {
        return None;
    }
    let hits = coords.iter().filter(|&&c| band[c]).count();
    let uniform = inside as f64 / band.len() as f64;
    Some(hits as f64 / coords.len() as f64 / uniform)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn topk_examples() {
        let h = Array3::from_shape_vec((1, 1, 3), vec![0.1f32, 0.9, 0.4]).unwrap();
        assert_eq!(sample_topk(h.view(), 1).unwrap(), vec![[0, 0, 1]]);
        assert_eq!(sample_topk(h.view(), 3).unwrap().len(), 3);
        let t = Array3::from_shape_vec((1, 1, 3), vec![0.5f32, 0.5, 0.2]).unwrap();
        assert_eq!(sample_topk(t.view(), 2).unwrap(), vec![[0, 0, 0], [0, 0, 1]]);
        assert!(sample_topk(t.view(), 0).is_err());
        assert!(sample_topk(t.view(), 4).is_err());
    }

    #[test]
    fn oversample_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(oversample_uniform([2, 2, 2], 0, &[], &mut rng).unwrap().is_empty());
        let ex = [[0, 0, 0], [1, 1, 1]];
        let mut all = oversample_uniform([2, 2, 2], 6, &ex, &mut rng).unwrap();
        all.sort();
        let mut expect: Vec<Coord> = (0..8).map(|i| coord_of([2, 2, 2], i)).filter(|c| !ex.contains(c)).collect();
        expect.sort();
        assert_eq!(all, expect);
        assert!(matches!(
            oversample_uniform([2, 2, 2], 7, &ex, &mut rng),
            Err(Error::InfeasibleSample(_))
        ));
    }

    #[test]
    fn oversample_is_deterministic_and_distinct() {
        let a = oversample_uniform([4, 4, 4], 20, &[], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = oversample_uniform([4, 4, 4], 20, &[], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 20);
    }

    #[test]
    fn oversample_is_uniform_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0f64; 64];
        let draws = 10_000;
        for _ in 0..draws {
            let c = oversample_uniform([4, 4, 4], 1, &[], &mut rng).unwrap()[0];
            counts[linear_index([4, 4, 4], c)] += 1.0;
        }
        let e = draws as f64 / 64.0;
        let stat: f64 = counts.iter().map(|o| (o - e) * (o - e) / e).sum();
        let p = 1.0 - ChiSquared::new(63.0).unwrap().cdf(stat);
        assert!(p > 1e-3, "p = {p}");
    }

    #[test]
    fn band_around_a_plane() {
        let labels = Array3::from_shape_fn((8, 8, 8), |(z, _, _)| u16::from(z >= 4));
        let band = boundary_band(labels.view(), 2.0);
        for ((z, _, _), &b) in band.indexed_iter() {
            assert_eq!(b, (1..=6).contains(&z), "z = {z}");
        }
        let near: Vec<Coord> = vec![[3, 0, 0], [4, 5, 5]];
        assert!((band_concentration(&band, &near).unwrap() - 8.0 / 6.0).abs() < 1e-12);
        assert_eq!(band_concentration(&band, &[[0, 0, 0]]), Some(0.0));
        let flat = Array3::<u16>::zeros((4, 4, 4));
        assert_eq!(band_concentration(&boundary_band(flat.view(), 2.0), &[[0, 0, 0]]), None);
    }
}
