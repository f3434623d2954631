//! Exact squared Euclidean distance transform (separable lower-envelope method)
//! with per-axis spacing.

use ndarray::{Array3, Axis};

use crate::data::Coord;

/// Squared distance along a line of samples `f` with sample spacing `s`.
fn transform_line(f: &[f64], s: f64, out: &mut [f64]) {
    let s2 = s * s;
    let g: Vec<f64> = f.iter().map(|&v| v / s2).collect();
    let sites: Vec<usize> = (0..f.len()).filter(|&q| g[q].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut v = vec![sites[0]];
    let mut z = vec![f64::NEG_INFINITY, f64::INFINITY];
    for &q in &sites[1..] {
        let cross = |p: usize| ((g[q] + (q * q) as f64) - (g[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
        let mut x = cross(*v.last().unwrap());
        while x <= z[v.len() - 1] {
            v.pop();
            z.pop();
            x = cross(*v.last().unwrap());
        }
        *z.last_mut().unwrap() = x;
        v.push(q);
        z.push(f64::INFINITY);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * s;
        *o = f[v[k]] + d * d;
    }
}

/// Squared physical distance from every voxel to the nearest `true` voxel
/// (infinite everywhere when there is none).
pub fn squared_distance_transform(features: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut cur = features.mapv(|b| if b { 0.0 } else { f64::INFINITY });
    for (axis, &s) in spacing.iter().enumerate() {
        let mut out = Array3::<f64>::zeros(cur.raw_dim());
        let mut line = vec![0.0; cur.len_of(Axis(axis))];
        let mut res = vec![0.0; line.len()];
        for (src, mut dst) in cur.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
            line.iter_mut().zip(src.iter()).for_each(|(l, &v)| *l = v);
            transform_line(&line, s, &mut res);
            dst.iter_mut().zip(&res).for_each(|(d, &r)| *d = r);
        }
        cur = out;
    }
    cur
}

/// Voxels of `mask` with a 6-neighbour outside the mask; voxels on the volume
/// border count as surface.
pub fn surface_voxels(mask: &Array3<bool>) -> Vec<Coord> {
    let (d, h, w) = mask.dim();
    let mut out = Vec::new();
    for ((i, j, k), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let border = i == 0 || j == 0 || k == 0 || i + 1 == d || j + 1 == h || k + 1 == w;
        if border
            || !mask[[i - 1, j, k]]
            || !mask[[i + 1, j, k]]
            || !mask[[i, j - 1, k]]
            || !mask[[i, j + 1, k]]
            || !mask[[i, j, k - 1]]
            || !mask[[i, j, k + 1]]
        {
            out.push([i, j, k]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let shape = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
            let f = Array3::from_shape_simple_fn(shape, || rng.random_bool(0.08));
            let sp = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
            let dt = squared_distance_transform(&f, sp);
            let pts: Vec<_> = f.indexed_iter().filter(|(_, &b)| b).map(|(c, _)| c).collect();
            for ((i, j, k), &d) in dt.indexed_iter() {
                let brute = pts
                    .iter()
                    .map(|&(a, b, c)| {
                        let x = (i as f64 - a as f64) * sp[0];
                        let y = (j as f64 - b as f64) * sp[1];
                        let z = (k as f64 - c as f64) * sp[2];
                        x * x + y * y + z * z
                    })
                    .fold(f64::INFINITY, f64::min);
                if brute.is_infinite() {
                    assert!(d.is_infinite());
                } else {
                    assert!((d - brute).abs() < 1e-9, "{d} vs {brute}");
                }
            }
        }
    }

    #[test]
    fn surface_of_solid_block() {
        let mut m = Array3::from_elem((5, 5, 5), false);
        m.slice_mut(ndarray::s![1..4, 1..4, 1..4]).fill(true);
        let s = surface_voxels(&m);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2, 2, 2]));
    }
}
