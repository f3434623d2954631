use super::*;
use crate::data::{crop, generate_phantom, PhantomSpec};
use crate::encoder::EncoderConfig;
use crate::cas::CvaeConfig;
use crate::interaction::HeadKind;
use crate::text::build_prompts;

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            stem_channels: 4,
            stage_widths: vec![4, 8],
            blocks_per_stage: 1,
            token_dim: 8,
            projected_dim: 4,
            ..EncoderConfig::default()
        },
        cas: CvaeConfig {
            widths: [2, 4],
            ..CvaeConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        steps_per_epoch: 2,
        patch_size: [8, 8, 8],
        seed: 4,
        ..TrainConfig::default()
    }
}

fn fixture() -> (TextBank, Vec<(Volume, LabelVolume)>) {
    let mut data = Vec::new();
    let mut bank = None;
    for seed in 0..2 {
        let spec = PhantomSpec::synthetic([12, 12, 12], 2, seed).unwrap();
        let (v, l, adj) = generate_phantom(&spec).unwrap();
        if bank.is_none() {
            let p = build_prompts(&spec.class_names(), &adj).unwrap();
            bank = Some(TextBank::synthetic(&p, 8, 0).unwrap());
        }
        data.push((znormalize(&v).unwrap(), l));
    }
    (bank.unwrap(), data)
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 1e-3).unwrap(), 0.0);
    assert!((total_loss(0.5, 0.3, 0.1, 2.0, 1e-3).unwrap() - 0.902).abs() < 1e-12);
    assert_eq!(total_loss(0.5, 0.3, 0.1, 7.0, 0.0).unwrap(), total_loss(0.5, 0.3, 0.1, 2.0, 0.0).unwrap());
    let err = total_loss(0.5, f64::NAN, 0.1, 2.0, 1e-3).unwrap_err();
    assert!(err.to_string().contains("f1"));
}

#[test]
fn seeded_runs_are_identical() {
    let (bank, data) = fixture();
    let run = || {
        let mut t = Trainer::new(small_model(), small_train(), &bank).unwrap();
        fit(&mut t, &data, &FitOptions::default()).unwrap().records
    };
    let a = run();
    assert_eq!(a.len(), 6);
    assert_eq!(a, run());
}

#[test]
fn resume_matches_unbroken_run() {
    let (bank, data) = fixture();
    let mut full = Trainer::new(small_model(), small_train(), &bank).unwrap();
    let unbroken = fit(&mut full, &data, &FitOptions::default()).unwrap().records;

    let mut first = Trainer::new(small_model(), small_train(), &bank).unwrap();
    let opts = FitOptions {
        max_steps: Some(3),
        ..FitOptions::default()
    };
    let head = fit(&mut first, &data, &opts).unwrap().records;
    let bytes = encode_checkpoint(&first).unwrap();
    let mut resumed = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&resumed).unwrap(), bytes);
    let tail = fit(&mut resumed, &data, &FitOptions::default()).unwrap().records;
    let joined: Vec<LossRecord> = head.into_iter().chain(tail).collect();
    assert_eq!(joined, unbroken);
    assert_eq!(encode_checkpoint(&resumed).unwrap(), encode_checkpoint(&full).unwrap());
}

#[test]
fn text_table_is_frozen() {
    let (bank, data) = fixture();
    let mut t = Trainer::new(small_model(), small_train(), &bank).unwrap();
    let before = t.model.text_embeddings().clone();
    fit(&mut t, &data, &FitOptions::default()).unwrap();
    assert_eq!(t.model.text_embeddings(), &before);
}

#[test]
fn checkpoint_errors() {
    let (bank, _) = fixture();
    let t = Trainer::new(small_model(), small_train(), &bank).unwrap();
    let bytes = encode_checkpoint(&t).unwrap();
    let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, Error::CorruptCheckpoint(_)));
    let mut bumped = bytes.clone();
    bumped[8..12].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(decode_checkpoint(&bumped), Err(Error::UnsupportedCheckpointVersion(2))));
    assert!(matches!(decode_checkpoint(&bytes[..10]), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn zero_epochs_is_a_no_op() {
    let (bank, data) = fixture();
    let cfg = TrainConfig { epochs: 0, ..small_train() };
    let mut t = Trainer::new(small_model(), cfg, &bank).unwrap();
    let before = encode_checkpoint(&t).unwrap();
    assert!(fit(&mut t, &data, &FitOptions::default()).unwrap().records.is_empty());
    assert_eq!(encode_checkpoint(&t).unwrap(), before);
}

#[test]
fn full_sampling_covers_every_voxel() {
    let (bank, data) = fixture();
    for (strategy, ratio, n) in [(SamplingStrategy::None, 0.1, 2), (SamplingStrategy::Cas, 1.0, 0)] {
        let cfg = TrainConfig {
            sampling: strategy,
            sample_ratio: ratio,
            oversample_factor: n,
            epochs: 2,
            steps_per_epoch: 1,
            ..small_train()
        };
        let mut t = Trainer::new(small_model(), cfg, &bank).unwrap();
        let (v, l) = crop(&data[0].0, &data[0].1, [0, 0, 0], [8, 8, 8]).unwrap();
        for _ in 0..2 {
            let out = t.train_step(&v, &l).unwrap();
            assert_eq!(out.samples.len(), 512);
        }
    }
}

#[test]
fn cas_union_sizes_after_cold_start() {
    let (bank, data) = fixture();
    let cfg = TrainConfig { steps_per_epoch: 1, ..small_train() };
    let mut t = Trainer::new(small_model(), cfg, &bank).unwrap();
    let (v, l) = crop(&data[0].0, &data[0].1, [2, 2, 2], [8, 8, 8]).unwrap();
    let cold = t.train_step(&v, &l).unwrap().samples;
    assert!(cold.complexity_coords().next().is_none());
    let warm = t.train_step(&v, &l).unwrap().samples;
    assert_eq!(warm.complexity_coords().count(), 52);
    assert_eq!(warm.len(), 52 * 3);
    let mut c = warm.coords.clone();
    c.sort();
    c.dedup();
    assert_eq!(c.len(), warm.len());
}

#[test]
fn linear_head_trains() {
    let (bank, data) = fixture();
    let mut m = small_model();
    m.interaction.head = HeadKind::Linear;
    let mut t = Trainer::new(m, small_train(), &bank).unwrap();
    let r = fit(&mut t, &data, &FitOptions::default()).unwrap();
    assert!(r.records.iter().all(|x| x.total.is_finite()));
}

