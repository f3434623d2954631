//! Minimal layer library with explicit forward/backward passes.
//!
//! Feature maps are channel-first `Array4` values `(C, D, H, W)`. Layers own their
//! [`Param`]s; `backward` accumulates into `Param::grad` and returns the input gradient.

mod adam;
mod conv;
pub mod gradcheck;
mod norm;
mod ops;
mod param;
mod resample;

pub use adam::{Adam, AdamConfig, AdamState};
pub use conv::{Conv3d, Padding};
pub use norm::{InstanceNorm3d, NormTape};
pub use ops::{l2_normalize_rows, l2_normalize_rows_backward, relu_backward_inplace, relu_inplace, sigmoid};
pub use param::{collect_params, zero_grads, Module, Param};
pub use resample::{upsample_trilinear, upsample_trilinear_backward};
