use ndarray::{Array2, Array4, ArrayView1, Axis};

use crate::data::{linear_index, Coord};
use crate::error::{Error, Result};
use crate::real::Real;

/// Coordinate-addressable per-voxel tokens, stored channel-first as `dim x (D*H*W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStore<T> {
    shape: [usize; 3],
    tokens: Array2<T>,
}

impl<T: Real> TokenStore<T> {
    /// Wraps an encoder output `(dim, D, H, W)`.
    pub fn from_feature_map(map: Array4<T>) -> Self {
        let (c, d, h, w) = map.dim();
        let map = if map.is_standard_layout() {
            map
        } else {
            map.as_standard_layout().into_owned()
        };
        let tokens = map.into_shape_with_order((c, d * h * w)).expect("contiguous");
        Self {
            shape: [d, h, w],
            tokens,
        }
    }

    pub fn from_channel_major(shape: [usize; 3], tokens: Array2<T>) -> Result<Self> {
        if tokens.ncols() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "{} token columns for shape {shape:?}",
                tokens.ncols()
            )));
        }
        Ok(Self { shape, tokens })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn num_voxels(&self) -> usize {
        self.tokens.ncols()
    }

    /// Channel-major storage `(dim, voxels)`.
    pub fn channel_major(&self) -> &Array2<T> {
        &self.tokens
    }

    /// Voxel-major copy `(voxels, dim)`.
    pub fn to_rows(&self) -> Array2<T> {
        self.tokens.t().as_standard_layout().into_owned()
    }

    pub fn get(&self, c: Coord) -> Result<ArrayView1<'_, T>> {
        self.check(c)?;
        Ok(self.tokens.column(linear_index(self.shape, c)))
    }

    fn check(&self, c: Coord) -> Result<()> {
        if (0..3).any(|a| c[a] >= self.shape[a]) {
            return Err(Error::OutOfBounds {
                coord: c,
                shape: self.shape,
            });
        }
        Ok(())
    }

    /// Rows `K x dim` in the order of `coords`; duplicates allowed.
    pub fn gather(&self, coords: &[Coord]) -> Result<Array2<T>> {
        let mut out = Array2::<T>::zeros((coords.len(), self.dim()));
        for (mut row, &c) in out.axis_iter_mut(Axis(0)).zip(coords) {
            self.check(c)?;
            row.assign(&self.tokens.column(linear_index(self.shape, c)));
        }
        Ok(out)
    }

    /// Adjoint of [`gather`](Self::gather): accumulates row gradients into a dense
    /// `(dim, D, H, W)` map.
    pub fn scatter_add(shape: [usize; 3], coords: &[Coord], rows: &Array2<T>) -> Array4<T> {
        let dim = rows.ncols();
        let n: usize = shape.iter().product();
        let mut dense = Array2::<T>::zeros((dim, n));
        for (row, &c) in rows.axis_iter(Axis(0)).zip(coords) {
            let idx = linear_index(shape, c);
            let mut col = dense.column_mut(idx);
            col += &row;
        }
        dense
            .into_shape_with_order((dim, shape[0], shape[1], shape[2]))
            .expect("dense layout")
    }
}
