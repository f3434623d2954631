//! Invariant suite: gradient checks, loss identities and metric oracles.

use std::fmt::Write;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cas::{cas_losses, reparameterize, Cvae, CvaeConfig, LatentField};
use crate::data::{Adjacency, Coord};
use crate::encoder::{EncoderConfig, TokenStore};
use crate::error::Result;
use crate::interaction::{ce_loss, cosine_logits, f1_loss, F1Aggregation, HeadKind, LossOutput, SimilarityBlock};
use crate::metrics::{brute_force_mask_metrics, mask_metrics, MetricOptions};
use crate::model::{ModelConfig, SegmentationModel};
use crate::nn::gradcheck::{max_input_grad_error, max_param_grad_error, relative_error};
use crate::nn::{zero_grads, Module};
use crate::text::{build_prompts, TextBank};

/// Largest acceptable relative error between analytic and central-difference gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelfTestReport {
    pub checks: Vec<Check>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        out
    }
}

fn logit_fd_error(logits: &Array2<f64>, f: &dyn Fn(&SimilarityBlock<f64>) -> Result<LossOutput<f64>>) -> Result<f64> {
    let grad = f(&SimilarityBlock::from_logits(logits.clone()))?.grad_logits;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for idx in ndarray::indices_of(logits) {
        let mut p = logits.clone();
        p[idx] += h;
        let up = f(&SimilarityBlock::from_logits(p.clone()))?.value;
        p[idx] -= 2.0 * h;
        let down = f(&SimilarityBlock::from_logits(p))?.value;
        worst = worst.max(relative_error(grad[idx], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Random logits with at least one foreground label.
fn logit_fixture(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let k = rng.random_range(2..9);
    let n = rng.random_range(2..7);
    let logits = Array2::from_shape_simple_fn((k, n), || rng.random_range(-3.0..3.0));
    let mut labels: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
    labels[0] = rng.random_range(1..n);
    (logits, labels)
}

/// Moves zero-initialized offsets away from zero, so no relu input sits exactly
/// on its kink where a receptive field is all zero.
fn jitter_offsets<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng) {
    m.visit_mut(&mut |p| {
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            p.value.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    });
}

fn model_fixture(rng: &mut ChaCha8Rng, head: HeadKind) -> Result<SegmentationModel<f64>> {
    let classes = rng.random_range(3..5);
    let token_dim = rng.random_range(4..8);
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            stem_channels: 2,
            stage_widths: vec![2, 3],
            blocks_per_stage: 1,
            token_dim,
            projected_dim: rng.random_range(2..=token_dim),
            ..EncoderConfig::default()
        },
        cas: CvaeConfig {
            widths: [2, 2],
            latent_components: 2,
            ..CvaeConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut cfg = cfg;
    cfg.interaction.head = head;
    let names: Vec<String> = (0..classes).map(|i| format!("class {i}")).collect();
    let prompts = build_prompts(&names, &Adjacency::from_pairs(classes, &[[1, 2]])?)?;
    let bank = TextBank::synthetic(&prompts, token_dim, rng.random())?;
    let mut model = SegmentationModel::new(cfg, &bank, rng)?;
    jitter_offsets(&mut model, rng);
    Ok(model)
}

fn encode_project_error(rng: &mut ChaCha8Rng, head: HeadKind) -> Result<f64> {
    let mut model = model_fixture(rng, head)?;
    let n = model.num_classes();
    let img = Array3::from_shape_simple_fn((4, 4, 4), || rng.random_range(-1.0..1.0));
    let mut coords: Vec<Coord> = Vec::new();
    while coords.len() < 6 {
        let c = [rng.random_range(0..4), rng.random_range(0..4), rng.random_range(0..4)];
        if !coords.contains(&c) {
            coords.push(c);
        }
    }
    let mut labels: Vec<usize> = coords.iter().map(|_| rng.random_range(0..n)).collect();
    labels[0] = 1;
    let agg = F1Aggregation::ClassMacro;
    let loss = |m: &SegmentationModel<f64>, img: &Array3<f64>| {
        let (t, _) = m.encode(img.view()).expect("encode");
        let rows = t.gather(&coords).expect("gather");
        let block = m.interact(rows.view(), None).expect("interact").0;
        ce_loss(&block, &labels).expect("ce").value + f1_loss(&block, &labels, agg).expect("f1").value
    };
    zero_grads(&mut model);
    let (tokens, etape) = model.encode(img.view())?;
    let rows = tokens.gather(&coords)?;
    let (block, itape) = model.interact(rows.view(), None)?;
    let mut dlogits = ce_loss(&block, &labels)?.grad_logits;
    dlogits += &f1_loss(&block, &labels, agg)?.grad_logits;
    let drows = model.interact_backward(&itape, dlogits.view());
    let dmap = TokenStore::scatter_add([4, 4, 4], &coords, &drows);
    let dimg = model.encoder.backward(&etape, &dmap);
    let seed = rng.random();
    let params = max_param_grad_error(&mut model, &|m| loss(m, &img), 3, seed);
    let flat: Vec<f64> = img.iter().copied().collect();
    let g: Vec<f64> = dimg.iter().copied().collect();
    let f = |x: &[f64]| loss(&model, &Array3::from_shape_vec((4, 4, 4), x.to_vec()).expect("shape"));
    Ok(params.max(max_input_grad_error(&flat, &g, &f, 8, seed)))
}

fn cas_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = CvaeConfig {
        latent_components: rng.random_range(1..4),
        widths: [rng.random_range(2..5), rng.random_range(2..5)],
        kl_weight: rng.random_range(0.01..1.0),
        ..CvaeConfig::default()
    };
    let lambda = cfg.kl_weight;
    let mut cvae = Cvae::<f64>::new(cfg, rng)?;
    jitter_offsets(&mut cvae, rng);
    let img = Array3::from_shape_simple_fn((4, 4, 4), || rng.random_range(-1.0..1.0));
    let target = Array3::from_shape_simple_fn((4, 4, 4), || rng.random_range(0.0..1.0));
    let z = cvae.draw_noise([4, 4, 4], rng);
    let loss = |m: &Cvae<f64>| {
        let (lf, _) = m.encode(target.view(), img.view()).expect("encode");
        let lat = reparameterize(&lf, &z).expect("latent");
        let rec = m.decode(&lat, img.view()).expect("decode").0;
        cas_losses(target.view(), rec.view(), &lf, lambda).expect("losses").total
    };
    zero_grads(&mut cvae);
    cvae.fit_target(target.view(), img.view(), &z)?;
    Ok(max_param_grad_error(&mut cvae, &loss, 4, rng.random()))
}

fn summarize(name: &str, errors: Result<Vec<f64>>) -> Check {
    match errors {
        Ok(e) => {
            let worst = e.iter().copied().fold(0.0, f64::max);
            Check::new(
                name,
                worst <= GRAD_TOLERANCE && !e.is_empty(),
                format!("{} fixtures, worst relative error {worst:.2e}", e.len()),
            )
        }
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

/// Finite-difference checks at 64-bit over `fixtures` random fixtures per loss.
pub fn gradient_checks(fixtures: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let ce = (0..fixtures)
        .map(|_| {
            let (l, y) = logit_fixture(&mut rng);
            logit_fd_error(&l, &|b| ce_loss(b, &y))
        })
        .collect();
    checks.push(summarize("gradient ce_loss", ce));
    for (name, agg) in [
        ("gradient f1_loss (class macro)", F1Aggregation::ClassMacro),
        ("gradient f1_loss (per voxel)", F1Aggregation::PerVoxel),
    ] {
        let f1 = (0..fixtures)
            .map(|_| {
                let (l, y) = logit_fixture(&mut rng);
                logit_fd_error(&l, &|b| f1_loss(b, &y, agg))
            })
            .collect();
        checks.push(summarize(name, f1));
    }
    let cas = (0..fixtures).map(|_| cas_error(&mut rng)).collect();
    checks.push(summarize("gradient cas_losses", cas));
    for (name, head) in [
        ("gradient encode+project (cosine)", HeadKind::Cosine),
        ("gradient encode+project (linear)", HeadKind::Linear),
    ] {
        let e = (0..fixtures).map(|_| encode_project_error(&mut rng, head)).collect();
        checks.push(summarize(name, e));
    }
    checks
}

fn identity_check(name: &str, value: Result<f64>, expected: f64, tol: f64) -> Check {
    match value {
        Ok(v) => Check::new(name, (v - expected).abs() <= tol, format!("{v:.3e} vs {expected:.3e} (tol {tol:.0e})")),
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

/// Closed-form values of the three training losses.
pub fn loss_identity_checks() -> Vec<Check> {
    let mut checks = Vec::new();
    for classes in [2usize, 5, 118] {
        let text = Array2::from_shape_fn((classes, 4), |(_, j)| if j == 1 { 1.0 } else { 0.0 });
        let voxels = Array2::from_shape_fn((7, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        let labels: Vec<usize> = (0..7).map(|i| i % classes).collect();
        let v = cosine_logits(voxels.view(), text.view(), 0.07, None).and_then(|b| ce_loss(&b, &labels)).map(|l| l.value);
        checks.push(identity_check(
            &format!("uniform similarity ce = ln({classes})"),
            v,
            (classes as f64).ln(),
            1e-9,
        ));
    }
    let labels = [0usize, 1, 2, 3, 2, 1];
    let logits = Array2::from_shape_fn((6, 4), |(i, j)| if labels[i] == j { 0.0 } else { -1e3 });
    let v = f1_loss(&SimilarityBlock::from_logits(logits), &labels, F1Aggregation::ClassMacro).map(|l| l.value);
    checks.push(identity_check("perfect prediction f1 = 0", v, 0.0, 1e-9));
    let lf = LatentField {
        mu: Array4::<f64>::zeros((3, 2, 2, 2)),
        log_sigma: Array4::zeros((3, 2, 2, 2)),
    };
    let t = Array3::from_elem((2, 2, 2), 0.5);
    let v = cas_losses(t.view(), t.view(), &lf, 1.0).map(|l| l.kld);
    checks.push(identity_check("kld(mu=0, sigma=1) = 0", v, 0.0, 1e-12));
    checks
}

/// Compares the distance-transform metrics with the all-pairs oracle on random
/// `8^3` mask pairs with random anisotropic spacing.
pub fn metric_oracle_checks(pairs: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = MetricOptions::default();
    let (mut dice_mismatch, mut worst_nsd, mut worst_hd, mut compared) = (0, 0.0f64, 0.0f64, 0);
    for _ in 0..pairs {
        let density = rng.random_range(0.02..0.6);
        let p = Array3::from_shape_simple_fn((8, 8, 8), || rng.random_bool(density));
        let g = Array3::from_shape_simple_fn((8, 8, 8), || rng.random_bool(density));
        let spacing = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        match (mask_metrics(&p, &g, spacing, &opts), brute_force_mask_metrics(&p, &g, spacing, &opts)) {
            (Some(a), Some(b)) => {
                compared += 1;
                dice_mismatch += usize::from(a.0 != b.0);
                worst_nsd = worst_nsd.max((a.1 - b.1).abs());
                worst_hd = worst_hd.max((a.2 - b.2).abs());
            }
            (None, None) => {}
            _ => dice_mismatch += 1,
        }
    }
    vec![
        Check::new(
            "metric oracle dice",
            dice_mismatch == 0 && compared == pairs,
            format!("{compared} pairs, {dice_mismatch} mismatches"),
        ),
        Check::new("metric oracle nsd", worst_nsd <= 1e-9, format!("max |diff| {worst_nsd:.2e}")),
        Check::new("metric oracle hd95", worst_hd <= 1e-9, format!("max |diff| {worst_hd:.2e}")),
    ]
}

pub fn run_selftest(seed: u64) -> SelfTestReport {
    let mut checks = gradient_checks(20, seed);
    checks.extend(loss_identity_checks());
    checks.extend(metric_oracle_checks(200, seed));
    SelfTestReport { checks }
}
