//! Random geometric and intensity augmentation applied jointly to image and labels.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::volume::{LabelVolume, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Axes eligible for random flipping.
    pub flip_axes: [bool; 3],
    pub flip_probability: f64,
    /// Random multiples of 90 degrees in planes whose two extents are equal.
    pub rotate90: bool,
    pub zoom: bool,
    pub zoom_range: [f64; 2],
    pub intensity_jitter: bool,
    pub intensity_range: [f64; 2],
    pub patch_size: Option<[usize; 3]>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_axes: [true; 3],
            flip_probability: 0.5,
            rotate90: false,
            zoom: false,
            zoom_range: [0.9, 1.1],
            intensity_jitter: true,
            intensity_range: [0.9, 1.1],
            patch_size: None,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_axes: [false; 3],
            flip_probability: 0.0,
            rotate90: false,
            zoom: false,
            intensity_jitter: false,
            patch_size: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::InvalidConfig("flip_probability must lie in [0,1]".into()));
        }
        for (name, [lo, hi]) in [("zoom_range", self.zoom_range), ("intensity_range", self.intensity_range)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must satisfy 0 < lo <= hi")));
            }
        }
        if let Some(p) = self.patch_size {
            if p.contains(&0) {
                return Err(Error::InvalidConfig("patch_size must be positive".into()));
            }
        }
        Ok(())
    }
}

fn check_pair(v: &Volume, l: &LabelVolume) -> Result<()> {
    if v.shape() != l.shape() {
        return Err(Error::ShapeMismatch(format!(
            "volume {:?} vs labels {:?}",
            v.shape(),
            l.shape()
        )));
    }
    Ok(())
}

/// Reverses one axis of both grids.
pub fn flip(v: &Volume, l: &LabelVolume, axis: usize) -> Result<(Volume, LabelVolume)> {
    check_pair(v, l)?;
    let mut a = v.data().clone();
    a.invert_axis(Axis(axis));
    let mut b = l.labels().clone();
    b.invert_axis(Axis(axis));
    Ok((
        Volume::new(a, v.spacing())?,
        LabelVolume::new(b, l.num_classes())?,
    ))
}

/// Rotates by `k` quarter turns about `axis`. With `(p, q)` the remaining axes in
/// increasing order, one quarter turn maps index `(.., i_p, i_q)` to `(.., n_q - 1 - i_q, i_p)`.
pub fn rot90(v: &Volume, l: &LabelVolume, axis: usize, k: usize) -> Result<(Volume, LabelVolume)> {
    check_pair(v, l)?;
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
    }
    let mut spacing = v.spacing();
    let mut img = v.data().clone();
    let mut lab = l.labels().clone();
    let (p, q) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for _ in 0..(k % 4) {
        img = quarter_turn(&img, p, q);
        lab = quarter_turn(&lab, p, q);
        spacing.swap(p, q);
    }
    Ok((Volume::new(img, spacing)?, LabelVolume::new(lab, l.num_classes())?))
}

fn quarter_turn<T: Clone>(a: &Array3<T>, p: usize, q: usize) -> Array3<T> {
    // out[i_p = n_q-1-j_q, i_q = j_p] = in[j_p, j_q]  ⇔  out = swap(flip_q(in))
    let mut t = a.view();
    t.invert_axis(Axis(q));
    t.swap_axes(p, q);
    t.as_standard_layout().into_owned()
}

/// Isotropic zoom about the volume center, keeping the shape. Intensities are
/// trilinear, labels nearest-neighbor; samples outside clamp to the edge.
pub fn zoom(v: &Volume, l: &LabelVolume, factor: f64) -> Result<(Volume, LabelVolume)> {
    check_pair(v, l)?;
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("zoom factor {factor}")));
    }
    let shape = v.shape();
    let src = v.data();
    let lab = l.labels();
    let center: [f64; 3] = std::array::from_fn(|a| (shape[a] as f64 - 1.0) / 2.0);
    let mut out = Array3::<f32>::zeros((shape[0], shape[1], shape[2]));
    let mut out_l = Array3::<u16>::zeros((shape[0], shape[1], shape[2]));
    let clampf = |x: f64, n: usize| x.clamp(0.0, (n - 1) as f64);
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                let o = [d, h, w];
                let s: [f64; 3] =
                    std::array::from_fn(|a| clampf(center[a] + (o[a] as f64 - center[a]) / factor, shape[a]));
                let nn: [usize; 3] = std::array::from_fn(|a| s[a].round() as usize);
                out_l[(d, h, w)] = lab[(nn[0], nn[1], nn[2])];
                let i0: [usize; 3] = std::array::from_fn(|a| s[a].floor() as usize);
                let i1: [usize; 3] = std::array::from_fn(|a| (i0[a] + 1).min(shape[a] - 1));
                let t: [f64; 3] = std::array::from_fn(|a| s[a] - i0[a] as f64);
                let mut acc = 0.0f64;
                for corner in 0..8 {
                    let mut wgt = 1.0;
                    let mut idx = [0usize; 3];
                    for a in 0..3 {
                        if corner >> a & 1 == 1 {
                            wgt *= t[a];
                            idx[a] = i1[a];
                        } else {
                            wgt *= 1.0 - t[a];
                            idx[a] = i0[a];
                        }
                    }
                    if wgt != 0.0 {
                        acc += wgt * src[(idx[0], idx[1], idx[2])] as f64;
                    }
                }
                out[(d, h, w)] = acc as f32;
            }
        }
    }
    Ok((Volume::new(out, v.spacing())?, LabelVolume::new(out_l, l.num_classes())?))
}

/// Extracts the sub-block starting at `offset`.
pub fn crop(
    v: &Volume,
    l: &LabelVolume,
    offset: [usize; 3],
    size: [usize; 3],
) -> Result<(Volume, LabelVolume)> {
    check_pair(v, l)?;
    let shape = v.shape();
    if (0..3).any(|a| size[a] > shape[a]) {
        return Err(Error::PatchTooLarge { patch: size, shape });
    }
    if (0..3).any(|a| offset[a] + size[a] > shape[a]) {
        return Err(Error::InvalidArgument(format!(
            "crop offset {offset:?} + size {size:?} exceeds {shape:?}"
        )));
    }
    let sl = ndarray::s![
        offset[0]..offset[0] + size[0],
        offset[1]..offset[1] + size[1],
        offset[2]..offset[2] + size[2]
    ];
    Ok((
        Volume::new(v.data().slice(sl).to_owned(), v.spacing())?,
        LabelVolume::new(l.labels().slice(sl).to_owned(), l.num_classes())?,
    ))
}

/// Applies, in order: flips, quarter-turn rotation, zoom, intensity jitter, patch crop.
/// Deterministic in `seed`; geometric transforms act identically on both grids.
pub fn augment(
    v: &Volume,
    l: &LabelVolume,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(Volume, LabelVolume)> {
    check_pair(v, l)?;
    cfg.validate()?;
    if let Some(p) = cfg.patch_size {
        let shape = v.shape();
        if (0..3).any(|a| p[a] > shape[a]) {
            return Err(Error::PatchTooLarge { patch: p, shape });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = (v.clone(), l.clone());
    for axis in 0..3 {
        if cfg.flip_axes[axis] && rng.random_bool(cfg.flip_probability) {
            cur = flip(&cur.0, &cur.1, axis)?;
        }
    }
    if cfg.rotate90 {
        let shape = cur.0.shape();
        let eligible: Vec<usize> = (0..3)
            .filter(|&a| {
                let (p, q) = match a {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                shape[p] == shape[q]
            })
            .collect();
        if !eligible.is_empty() {
            let axis = eligible[rng.random_range(0..eligible.len())];
            let k = rng.random_range(0..4usize);
            cur = rot90(&cur.0, &cur.1, axis, k)?;
        }
    }
    if cfg.zoom {
        let f = rng.random_range(cfg.zoom_range[0]..=cfg.zoom_range[1]);
        cur = zoom(&cur.0, &cur.1, f)?;
    }
    if cfg.intensity_jitter {
        let f = rng.random_range(cfg.intensity_range[0]..=cfg.intensity_range[1]) as f32;
        let data = cur.0.data().mapv(|x| x * f);
        cur.0 = Volume::new(data, cur.0.spacing())?;
    }
    if let Some(p) = cfg.patch_size {
        let shape = cur.0.shape();
        if (0..3).any(|a| p[a] > shape[a]) {
            return Err(Error::PatchTooLarge { patch: p, shape });
        }
        let offset: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=shape[a] - p[a]));
        cur = crop(&cur.0, &cur.1, offset, p)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};

    fn fixture() -> (Volume, LabelVolume) {
        let spec = PhantomSpec::synthetic([8, 8, 8], 2, 3).unwrap();
        let (v, l, _) = generate_phantom(&spec).unwrap();
        (v, l)
    }

    #[test]
    fn double_flip_is_identity() {
        let (v, l) = fixture();
        let cfg = AugmentConfig {
            flip_axes: [true, false, false],
            flip_probability: 1.0,
            intensity_jitter: false,
            ..AugmentConfig::default()
        };
        let once = augment(&v, &l, 1, &cfg).unwrap();
        assert_ne!(once.1, l);
        let twice = augment(&once.0, &once.1, 1, &cfg).unwrap();
        assert_eq!(twice.0, v);
        assert_eq!(twice.1, l);
    }

    #[test]
    fn crop_offsets_are_reproducible() {
        let (v, l) = fixture();
        let cfg = AugmentConfig {
            patch_size: Some([4, 4, 4]),
            ..AugmentConfig::none()
        };
        let a = augment(&v, &l, 99, &cfg).unwrap();
        let b = augment(&v, &l, 99, &cfg).unwrap();
        assert_eq!(a.0.shape(), [4, 4, 4]);
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let (v, l) = fixture();
        let cfg = AugmentConfig {
            patch_size: Some([9, 4, 4]),
            ..AugmentConfig::none()
        };
        assert!(matches!(augment(&v, &l, 0, &cfg), Err(Error::PatchTooLarge { .. })));
    }

    #[test]
    fn quarter_turn_about_depth_moves_single_voxel() {
        let mut lab = vec![0u16; 27];
        lab[crate::data::linear_index([3, 3, 3], [0, 1, 0])] = 1;
        let img: Vec<f32> = lab.iter().map(|&x| x as f32).collect();
        let v = Volume::from_vec([3, 3, 3], [1.0; 3], img).unwrap();
        let l = LabelVolume::from_vec([3, 3, 3], 2, lab).unwrap();
        let (rv, rl) = rot90(&v, &l, 0, 1).unwrap();
        // (d, h, w) -> (d, W-1-w, h)
        let expected = [0, (3 - 1), 1];
        for d in 0..3 {
            for h in 0..3 {
                for w in 0..3 {
                    let want = ([d, h, w] == expected) as u16;
                    assert_eq!(rl.get([d, h, w]), want);
                    assert_eq!(rv.get([d, h, w]), want as f32);
                }
            }
        }
        let (back_v, back_l) = rot90(&rv, &rl, 0, 3).unwrap();
        assert_eq!(back_l, l);
        assert_eq!(back_v, v);
    }

    #[test]
    fn intensity_jitter_leaves_labels_untouched() {
        let (v, l) = fixture();
        let cfg = AugmentConfig {
            intensity_jitter: true,
            ..AugmentConfig::none()
        };
        let (av, al) = augment(&v, &l, 5, &cfg).unwrap();
        assert_eq!(al, l);
        let ratio = av.as_slice().iter().zip(v.as_slice()).find(|(_, b)| b.abs() > 0.1).map(|(a, b)| a / b).unwrap();
        assert!((0.9..=1.1).contains(&ratio));
    }

    #[test]
    fn unit_zoom_is_identity() {
        let (v, l) = fixture();
        let (zv, zl) = zoom(&v, &l, 1.0).unwrap();
        assert_eq!(zl, l);
        for (a, b) in zv.as_slice().iter().zip(v.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
