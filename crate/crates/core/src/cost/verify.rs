use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{complexity_profile, CostDims, CostProfile, MacCounter};
use crate::data::Adjacency;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::interaction::cosine_logits;
use crate::model::{ModelConfig, SegmentationModel};
use crate::text::{build_prompts, TextBank};

/// One instrumented configuration. `n` counts every scored text token,
/// background included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasuredCase {
    pub shape: [usize; 3],
    pub c: usize,
    pub m: usize,
    pub n: usize,
    /// Sampled voxels; `None` scores every voxel.
    pub k: Option<usize>,
    /// Score raw `C`-dim tokens directly, with no projection.
    pub unprojected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacVerification {
    pub case: MeasuredCase,
    pub measured: u64,
    pub predicted: u64,
    pub profile: CostProfile,
    pub passed: bool,
}

/// Runs the real interaction path on a random image and compares the counted
/// multiply-accumulates (backbone excluded) with the closed-form cost.
pub fn verify_measured_macs(case: MeasuredCase, seed: u64) -> Result<MacVerification> {
    if case.n < 2 {
        return Err(Error::InvalidArgument("need background plus at least one class".into()));
    }
    if case.unprojected && case.m != case.c {
        return Err(Error::InvalidArgument("unprojected scoring requires M = C".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..case.n)
        .map(|i| if i == 0 { "background".to_string() } else { format!("class{i}") })
        .collect();
    let prompts = build_prompts(&names, &Adjacency::empty(case.n))?;
    let bank = TextBank::synthetic(&prompts, case.c, seed)?;
    let config = ModelConfig {
        encoder: EncoderConfig {
            stem_channels: 4,
            stage_widths: vec![4, 8],
            blocks_per_stage: 1,
            token_dim: case.c,
            projected_dim: case.m,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    let model = SegmentationModel::<f32>::new(config, &bank, &mut rng)?;
    let image = Array3::from_shape_simple_fn(case.shape, || rng.random_range(-1.0f32..1.0));
    let (tokens, _) = model.encode(image.view())?;
    let voxels = tokens.num_voxels();
    let k = case.k.unwrap_or(voxels);
    let rows = match case.k {
        None => tokens.to_rows(),
        Some(k) => {
            let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, voxels, k).into_vec();
            picks.sort_unstable();
            let hw = case.shape[1] * case.shape[2];
            let coords: Vec<_> = picks.iter().map(|&i| [i / hw, (i % hw) / case.shape[2], i % case.shape[2]]).collect();
            tokens.gather(&coords)?
        }
    };
    let counter = MacCounter::default();
    if case.unprojected {
        cosine_logits(rows.view(), model.text_embeddings().view(), 0.07, Some(&counter))?;
    } else {
        model.interact(rows.view(), Some(&counter))?;
    }
    let profile = complexity_profile(CostDims {
        d: case.shape[0] as u64,
        h: case.shape[1] as u64,
        w: case.shape[2] as u64,
        c: case.c as u64,
        m: case.m as u64,
        n: case.n as u64,
        k: k as u64,
    })?;
    let predicted = match (case.unprojected, case.k) {
        (true, None) => profile.omega_c,
        (true, Some(_)) => k as u64 * case.c as u64 * case.n as u64,
        (false, None) => profile.omega_m,
        (false, Some(_)) => profile.omega_mk,
    };
    let measured = counter.get();
    Ok(MacVerification {
        case,
        measured,
        predicted,
        profile,
        passed: measured == predicted,
    })
}
