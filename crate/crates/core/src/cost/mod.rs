//! Multiply-accumulate cost model of the voxel-text interaction path and its
//! measured counterpart.
//!
//! One fused multiply-add counts as one MAC. Softmax, normalization and additions
//! are not counted; only the matrix products are.

mod verify;

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use verify::{verify_measured_macs, MacVerification, MeasuredCase};

/// Per-run MAC accumulator threaded through the instrumented forward path.
#[derive(Debug, Default)]
pub struct MacCounter(Cell<u64>);

impl MacCounter {
    pub fn add(&self, n: u64) {
        self.0.set(self.0.get() + n);
    }

    pub fn get(&self) -> u64 {
        self.0.get()
    }

    pub fn reset(&self) {
        self.0.set(0);
    }
}

/// Problem dimensions: grid `D x H x W`, token dim `C`, projected dim `M`,
/// `N` text tokens (classes scored), `K` sampled voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostDims {
    pub d: u64,
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub dims: CostDims,
    /// Full-dimension similarity: `DHW*C*N`.
    pub omega_c: u64,
    /// Projected similarity: `DHW*C*M + N*C*M + DHW*M*N`.
    pub omega_m: u64,
    /// Projected and sampled: `K*C*M + N*C*M + K*M*N`.
    pub omega_mk: u64,
    pub ratio_m: f64,
    pub ratio_mk: f64,
}

fn mul(xs: &[u64]) -> Result<u64> {
    xs.iter().try_fold(1u64, |acc, &x| {
        acc.checked_mul(x)
            .ok_or_else(|| Error::InvalidArgument("MAC count overflows u64".into()))
    })
}

pub fn complexity_profile(dims: CostDims) -> Result<CostProfile> {
    let CostDims { d, h, w, c, m, n, k } = dims;
    if [d, h, w, c, m, n, k].contains(&0) {
        return Err(Error::InvalidArgument("all cost dimensions must be positive".into()));
    }
    let voxels = mul(&[d, h, w])?;
    if k > voxels {
        return Err(Error::InvalidArgument(format!("K={k} exceeds DHW={voxels}")));
    }
    if m > c {
        return Err(Error::InvalidArgument(format!("M={m} exceeds C={c}")));
    }
    let omega_c = mul(&[voxels, c, n])?;
    let text = mul(&[n, c, m])?;
    let omega_m = mul(&[voxels, c, m])? + text + mul(&[voxels, m, n])?;
    let omega_mk = mul(&[k, c, m])? + text + mul(&[k, m, n])?;
    Ok(CostProfile {
        dims,
        omega_c,
        omega_m,
        omega_mk,
        ratio_m: omega_m as f64 / omega_c as f64,
        ratio_mk: omega_mk as f64 / omega_c as f64,
    })
}

/// `K = ceil(ratio * voxels)`, at least 1.
pub fn sample_count(voxels: usize, ratio: f64) -> usize {
    ((ratio * voxels as f64).ceil() as usize).clamp(1, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(s: u64, c: u64, m: u64, n: u64, k: u64) -> CostDims {
        CostDims { d: s, h: s, w: s, c, m, n, k }
    }

    #[test]
    fn desk_scale_reference_values() {
        let p = complexity_profile(dims(32, 64, 32, 117, 3276)).unwrap();
        assert_eq!(p.omega_c, 245_366_784);
        assert_eq!(p.omega_m, 190_031_872);
        assert_eq!(p.omega_mk, 19_214_208);
    }

    #[test]
    fn no_reduction_degenerates() {
        let p = complexity_profile(dims(4, 8, 8, 3, 64)).unwrap();
        assert_eq!(p.omega_mk, p.omega_m);
    }

    #[test]
    fn single_class_projection_costs_more() {
        let (s, c) = (4u64, 8u64);
        let p = complexity_profile(dims(s, c, c, 1, s * s * s)).unwrap();
        let v = s * s * s;
        assert_eq!(p.omega_m, v * c * c + c * c + v * c);
        assert!(p.omega_m >= p.omega_c);
    }

    #[test]
    fn constraint_violations() {
        assert!(complexity_profile(dims(2, 4, 8, 3, 1)).is_err());
        assert!(complexity_profile(dims(2, 8, 4, 3, 9)).is_err());
        assert!(complexity_profile(dims(2, 8, 4, 0, 1)).is_err());
    }

    #[test]
    fn sampling_strictly_reduces_cost() {
        let mut prev = 0;
        for k in 1..=64 {
            let p = complexity_profile(dims(4, 16, 8, 5, k)).unwrap();
            assert!(p.omega_mk > prev);
            if k < 64 {
                assert!(p.omega_mk < p.omega_m);
            } else {
                assert_eq!(p.omega_mk, p.omega_m);
            }
            prev = p.omega_mk;
        }
    }
}
