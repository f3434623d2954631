//! Fixtures shared by the benchmarks.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxlang::data::{generate_phantom, znormalize, LabelVolume, PhantomSpec, Volume};
use voxlang::model::{ModelConfig, SegmentationModel};
use voxlang::text::{build_prompts, TextBank};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform3(shape: [usize; 3], seed: u64) -> Array3<f32> {
    let mut r = rng(seed);
    Array3::from_shape_simple_fn(shape, || r.random_range(-1.0..1.0))
}

pub fn uniform4(shape: [usize; 4], seed: u64) -> Array4<f32> {
    let mut r = rng(seed);
    Array4::from_shape_simple_fn(shape, || r.random_range(-1.0..1.0))
}

pub fn uniform2(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
}

/// A normalized phantom with its labels and a matching text bank.
pub fn phantom(shape: [usize; 3], classes: usize, token_dim: usize) -> (Volume, LabelVolume, TextBank) {
    let spec = PhantomSpec::synthetic(shape, classes, 0).expect("phantom spec");
    let (v, l, adj) = generate_phantom(&spec).expect("phantom");
    let prompts = build_prompts(&spec.class_names(), &adj).expect("prompts");
    let bank = TextBank::synthetic(&prompts, token_dim, 0).expect("text bank");
    (znormalize(&v).expect("normalize"), l, bank)
}

pub fn model(config: ModelConfig, bank: &TextBank) -> SegmentationModel<f32> {
    SegmentationModel::new(config, bank, &mut rng(1)).expect("model")
}
