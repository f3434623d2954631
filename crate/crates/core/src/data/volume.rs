use ndarray::Array3;

use crate::error::{Error, Result};

/// Voxel coordinate `(d, h, w)`.
pub type Coord = [usize; 3];

/// Row-major (d, then h, then w) linear index.
#[inline]
pub fn linear_index(shape: [usize; 3], c: Coord) -> usize {
    (c[0] * shape[1] + c[1]) * shape[2] + c[2]
}

/// Dense scalar intensity grid with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume voxels".into()));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("volume must be non-empty".into()));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(Self { data, spacing })
    }

    pub fn from_vec(shape: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} voxels for shape {shape:?}",
                voxels.len()
            )));
        }
        let data = Array3::from_shape_vec((shape[0], shape[1], shape[2]), voxels)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(data, spacing)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn get(&self, c: Coord) -> f32 {
        self.data[(c[0], c[1], c[2])]
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }
}

/// Dense integer class grid. Class 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    labels: Array3<u16>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(labels: Array3<u16>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > u16::MAX as usize + 1 {
            return Err(Error::InvalidArgument(format!(
                "num_classes {num_classes} out of range"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                num_classes,
            });
        }
        let labels = if labels.is_standard_layout() {
            labels
        } else {
            labels.as_standard_layout().to_owned()
        };
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn from_vec(shape: [usize; 3], num_classes: usize, labels: Vec<u16>) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for shape {shape:?}",
                labels.len()
            )));
        }
        let labels = Array3::from_shape_vec((shape[0], shape[1], shape[2]), labels)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(labels, num_classes)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &Array3<u16> {
        &self.labels
    }

    pub fn as_slice(&self) -> &[u16] {
        self.labels.as_slice().expect("standard layout")
    }

    pub fn get(&self, c: Coord) -> u16 {
        self.labels[(c[0], c[1], c[2])]
    }

    /// Voxel count per class, indexed by class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes];
        for &l in self.labels.iter() {
            h[l as usize] += 1;
        }
        h
    }

    pub fn has_foreground(&self) -> bool {
        self.labels.iter().any(|&l| l != 0)
    }

    pub fn into_labels(self) -> Array3<u16> {
        self.labels
    }
}
