//! Deterministic ellipsoid phantoms standing in for labeled CT scans.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::volume::{LabelVolume, Volume};
use crate::error::{Error, Result};

const ORGAN_NAMES: &[&str] = &[
    "liver",
    "spleen",
    "left kidney",
    "right kidney",
    "stomach",
    "pancreas",
    "gallbladder",
    "aorta",
    "esophagus",
    "duodenum",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Center in voxel index coordinates.
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, d: usize, h: usize, w: usize) -> bool {
        let p = [d as f64, h as f64, w as f64];
        let mut acc = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.radii[a];
            acc += t * t;
        }
        acc <= 1.0
    }
}

/// One foreground structure of a phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Organ {
    pub name: String,
    pub ellipsoid: Ellipsoid,
    pub intensity: f32,
}

/// Symmetric neighbor relation between classes (index 0 is background).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); num_classes],
        }
    }

    /// Builds a symmetric relation from undirected pairs.
    pub fn from_pairs(num_classes: usize, pairs: &[[usize; 2]]) -> Result<Self> {
        let mut adj = Self::empty(num_classes);
        for &[a, b] in pairs {
            if a >= num_classes || b >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "adjacency pair ({a},{b}) references a class outside 0..{num_classes}"
                )));
            }
            if a == b {
                continue;
            }
            adj.insert(a, b);
        }
        Ok(adj)
    }

    /// Accepts explicit per-class lists; rejects asymmetric input.
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                if j >= n {
                    return Err(Error::InvalidArgument(format!(
                        "class {i} lists neighbor {j} outside 0..{n}"
                    )));
                }
                if !lists[j].contains(&i) {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency is not symmetric: {i} -> {j} without {j} -> {i}"
                    )));
                }
            }
        }
        let mut adj = Self::empty(n);
        for (i, list) in lists.into_iter().enumerate() {
            for j in list {
                if i != j {
                    adj.insert(i, j);
                }
            }
        }
        Ok(adj)
    }

    fn insert(&mut self, a: usize, b: usize) {
        for (x, y) in [(a, b), (b, a)] {
            if let Err(pos) = self.neighbors[x].binary_search(&y) {
                self.neighbors[x].insert(pos, y);
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.neighbors.len()
    }

    /// Neighbors of `class` in ascending class order.
    pub fn neighbors(&self, class: usize) -> &[usize] {
        &self.neighbors[class]
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    /// Undirected pairs `(a, b)` with `a < b`.
    pub fn pairs(&self) -> Vec<[usize; 2]> {
        let mut out = Vec::new();
        for (a, list) in self.neighbors.iter().enumerate() {
            for &b in list {
                if a < b {
                    out.push([a, b]);
                }
            }
        }
        out
    }

    /// Foreground contacts observed in a label map (6-connectivity). Background is ignored.
    pub fn from_label_contacts(labels: &LabelVolume) -> Self {
        let l = labels.labels();
        let [d, h, w] = labels.shape();
        let mut adj = Self::empty(labels.num_classes());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let a = l[(z, y, x)] as usize;
                    if a == 0 {
                        continue;
                    }
                    for (nz, ny, nx) in [(z + 1, y, x), (z, y + 1, x), (z, y, x + 1)] {
                        if nz < d && ny < h && nx < w {
                            let b = l[(nz, ny, nx)] as usize;
                            if b != 0 && b != a {
                                adj.insert(a, b);
                            }
                        }
                    }
                }
            }
        }
        adj
    }
}

/// Full description of a synthetic phantom. Organ `i` carries class label `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub organs: Vec<Organ>,
    pub adjacency: Adjacency,
    pub background_intensity: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn num_foreground_classes(&self) -> usize {
        self.organs.len()
    }

    pub fn num_classes(&self) -> usize {
        self.organs.len() + 1
    }

    /// Class names including the leading `background`.
    pub fn class_names(&self) -> Vec<String> {
        std::iter::once("background".to_string())
            .chain(self.organs.iter().map(|o| o.name.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "phantom shape must be positive, got {:?}",
                self.shape
            )));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("spacing must be positive".into()));
        }
        if self.organs.is_empty() {
            return Err(Error::InvalidArgument(
                "phantom needs at least one foreground class".into(),
            ));
        }
        if self.adjacency.num_classes() != self.num_classes() {
            return Err(Error::ClassCountMismatch {
                expected: self.num_classes(),
                found: self.adjacency.num_classes(),
            });
        }
        for o in &self.organs {
            if o.ellipsoid.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "organ `{}` has non-positive radii",
                    o.name
                )));
            }
            if !o.intensity.is_finite() {
                return Err(Error::NonFinite(format!("intensity of `{}`", o.name)));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Randomly placed organs with distinct base intensities; adjacency is taken
    /// from the contacts of the rasterized result. Retries placement until every
    /// class owns at least one voxel.
    pub fn synthetic(shape: [usize; 3], num_foreground: usize, seed: u64) -> Result<Self> {
        if num_foreground == 0 {
            return Err(Error::InvalidArgument(
                "phantom needs at least one foreground class".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _attempt in 0..200 {
            let organs = (0..num_foreground)
                .map(|i| {
                    let center = std::array::from_fn(|a| {
                        shape[a] as f64 * rng.random_range(0.28..0.72)
                    });
                    let radii = std::array::from_fn(|a| {
                        (shape[a] as f64 * rng.random_range(0.12..0.22)).max(1.0)
                    });
                    let name = ORGAN_NAMES
                        .get(i)
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| format!("structure {}", i + 1));
                    let intensity = 0.3 * (i + 1) as f32 + rng.random_range(-0.05..0.05);
                    Organ {
                        name,
                        ellipsoid: Ellipsoid { center, radii },
                        intensity,
                    }
                })
                .collect();
            let mut spec = PhantomSpec {
                shape,
                spacing: [1.5; 3],
                organs,
                adjacency: Adjacency::empty(num_foreground + 1),
                background_intensity: 0.0,
                noise_sigma: 0.1,
                seed,
            };
            let labels = match rasterize(&spec) {
                Ok(l) => l,
                Err(Error::DegenerateClass { .. }) => continue,
                Err(e) => return Err(e),
            };
            spec.adjacency = Adjacency::from_label_contacts(&labels);
            return Ok(spec);
        }
        Err(Error::InvalidArgument(format!(
            "could not place {num_foreground} organs in {shape:?}"
        )))
    }
}

fn rasterize(spec: &PhantomSpec) -> Result<LabelVolume> {
    let [d, h, w] = spec.shape;
    let mut labels = Array3::<u16>::zeros((d, h, w));
    for (idx, organ) in spec.organs.iter().enumerate() {
        let class = (idx + 1) as u16;
        let e = &organ.ellipsoid;
        // bounding box keeps large volumes cheap
        let range = |a: usize, n: usize| {
            let lo = (e.center[a] - e.radii[a]).floor().max(0.0) as usize;
            let hi = ((e.center[a] + e.radii[a]).ceil() + 1.0).max(0.0) as usize;
            lo.min(n)..hi.min(n)
        };
        for z in range(0, d) {
            for y in range(1, h) {
                for x in range(2, w) {
                    if e.contains(z, y, x) {
                        labels[(z, y, x)] = class;
                    }
                }
            }
        }
    }
    let labels = LabelVolume::new(labels, spec.num_classes())?;
    let hist = labels.histogram();
    if let Some(class) = (1..hist.len()).find(|&c| hist[c] == 0) {
        return Err(Error::DegenerateClass { class });
    }
    Ok(labels)
}

/// Rasterizes the phantom. Higher class indices win where ellipsoids overlap.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume, Adjacency)> {
    spec.validate()?;
    let labels = rasterize(spec)?;
    let mut intensities: Vec<f32> = labels
        .as_slice()
        .iter()
        .map(|&l| match l {
            0 => spec.background_intensity,
            c => spec.organs[c as usize - 1].intensity,
        })
        .collect();
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0f32, spec.noise_sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in intensities.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let volume = Volume::from_vec(spec.shape, spec.spacing, intensities)?;
    Ok((volume, labels, spec.adjacency.clone()))
}
