use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use voxlang::ablation::run_ablation;
use voxlang::config::RunConfig;
use voxlang::cost::{complexity_profile, verify_measured_macs, CostDims, MeasuredCase};
use voxlang::data::{read_volume, write_volume, znormalize, Adjacency, DatasetManifest, Split};
use voxlang::infer::{evaluate, sliding_window_predict, ClassMapping};
use voxlang::selftest::run_selftest;
use voxlang::text::write_embeddings;
use voxlang::train::{fit, load_checkpoint, load_split, FitOptions, Trainer};

/// Voxel-language segmentation with complexity-aware sampling.
#[derive(Debug, Parser)]
#[command(name = "voxlang", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `predict`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset, its manifest and text embeddings.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the training split of a dataset manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest (manifest.toml).
        #[arg(long)]
        data: PathBuf,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Segment one volume with a trained checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input VVOL volume.
        #[arg(long)]
        input: PathBuf,
    },
    /// Score a checkpoint on one split of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score a checkpoint on a dataset with a different label space.
    CrossEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// TOML table mapping dataset class names to model class names.
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print the closed-form interaction cost profile.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long = "D")]
        d: u64,
        #[arg(long = "H")]
        h: u64,
        #[arg(long = "W")]
        w: u64,
        #[arg(long = "C")]
        c: u64,
        #[arg(long = "M")]
        m: u64,
        /// Number of text tokens (classes scored, background included).
        #[arg(long = "N")]
        n: u64,
        #[arg(long = "K")]
        k: u64,
        /// Also count multiply-accumulates on an instrumented forward pass.
        #[arg(long)]
        measure: bool,
    },
    /// Run the sampling/head ablation grid from the `bench` section.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the invariant suite (gradient checks, loss identities, metric oracles).
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

/// Bad input from the user; exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.data.seed = s;
        cfg.data.embedding_seed = s;
        cfg.train.seed = s;
    }
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> anyhow::Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Usage(format!("unknown split `{s}` (expected train or test)")).into()),
    }
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    config: &'a str,
    #[serde(flatten)]
    body: T,
}

fn write_report<T: Serialize>(path: &Path, cfg: &RunConfig, body: T) -> anyhow::Result<()> {
    let snapshot = cfg.snapshot();
    let text = serde_json::to_string_pretty(&Report { config: &snapshot, body })?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_data(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, "data")?;
    let manifest = cfg.data.dataset().write(&dir)?;
    let adjacency = Adjacency::from_pairs(manifest.class_names.len(), &manifest.adjacency)?;
    let bank = cfg.text_bank(&manifest.class_names, &adjacency)?;
    write_embeddings(dir.join("embeddings.vemb"), bank.class_names(), bank.embeddings())?;
    fs::write(dir.join("config.toml"), cfg.snapshot())?;
    println!(
        "wrote {} volumes, manifest.toml and embeddings.vemb to {}",
        manifest.volumes.len(),
        dir.display()
    );
    Ok(())
}

fn train(common: &Common, data: &Path, resume: Option<&Path>, epochs: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let dir = out_dir(common, "run")?;
    let manifest = DatasetManifest::load(data)?;
    let volumes = load_split(&manifest, Split::Train)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = load_checkpoint(p)?;
            t.config.epochs = cfg.train.epochs;
            t
        }
        None => {
            let adjacency = Adjacency::from_pairs(manifest.class_names.len(), &manifest.adjacency)?;
            let bank = cfg.text_bank(&manifest.class_names, &adjacency)?;
            Trainer::new(cfg.model(), cfg.train.clone(), &bank)?
        }
    };
    fs::write(dir.join("config.toml"), cfg.snapshot())?;
    let opts = FitOptions {
        checkpoint_dir: Some(dir.clone()),
        loss_log: Some(dir.join("losses.jsonl")),
        max_steps: None,
    };
    let report = fit(&mut trainer, &volumes, &opts)?;
    if let Some(last) = report.records.last() {
        println!("step {} total loss {:.5}", last.step, last.total);
    }
    println!(
        "trained {} steps ({} skipped); checkpoint {}",
        report.records.len(),
        report.skipped_steps.len(),
        dir.join("final.vckpt").display()
    );
    Ok(())
}

fn predict(common: &Common, checkpoint: &Path, input: &Path) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let trainer = load_checkpoint(checkpoint)?;
    let (volume, _) = read_volume(input)?;
    let pred = sliding_window_predict(&trainer.model, &znormalize(&volume)?, &cfg.eval.inference())?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("prediction.vvol"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_volume(&out, &volume, Some(&pred.labels))?;
    let counts = pred.labels.histogram();
    for (name, n) in trainer.model.class_names().iter().zip(&counts) {
        println!("{name}: {n} voxels");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, data: &Path, split: &str, mapping: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let split = parse_split(split)?;
    let trainer = load_checkpoint(checkpoint)?;
    let manifest = DatasetManifest::load(data)?;
    let mapping = match mapping {
        Some(p) => ClassMapping::load(p).map_err(|e| Usage(e.to_string()))?,
        None => ClassMapping::default(),
    };
    let summary = evaluate(
        &trainer.model,
        &manifest,
        split,
        &mapping,
        &cfg.eval.inference(),
        &cfg.eval.metrics(),
    )?;
    if summary.reports.is_empty() {
        bail!("no volumes in the requested split");
    }
    let dir = out_dir(common, "eval")?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for r in &summary.reports {
        println!("{}: dice {} nsd {} hd95 {}", r.volume, fmt(r.mean_dice), fmt(r.mean_nsd), fmt(r.mean_hd95));
    }
    println!(
        "mean: dice {} nsd {} hd95 {}",
        fmt(summary.mean_dice),
        fmt(summary.mean_nsd),
        fmt(summary.mean_hd95)
    );
    write_report(&dir.join("metrics.json"), &cfg, &summary)
}

fn profile(common: &Common, dims: CostDims, measure: bool) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let p = complexity_profile(dims).map_err(|e| Usage(e.to_string()))?;
    println!("D={} H={} W={} C={} M={} N={} K={}", dims.d, dims.h, dims.w, dims.c, dims.m, dims.n, dims.k);
    println!("omega_c  = {}", p.omega_c);
    println!("omega_m  = {}", p.omega_m);
    println!("omega_mk = {}", p.omega_mk);
    println!("omega_m / omega_c  = {:.6}", p.ratio_m);
    println!("omega_mk / omega_c = {:.6}", p.ratio_mk);
    if measure {
        let to_usize = |v: u64| usize::try_from(v).context("dimension too large");
        let shape = [to_usize(dims.d)?, to_usize(dims.h)?, to_usize(dims.w)?];
        let voxels = dims.d * dims.h * dims.w;
        let case = MeasuredCase {
            shape,
            c: to_usize(dims.c)?,
            m: to_usize(dims.m)?,
            n: to_usize(dims.n)?,
            k: (dims.k < voxels).then(|| to_usize(dims.k)).transpose()?,
            unprojected: false,
        };
        let v = verify_measured_macs(case, cfg.train.seed)?;
        println!(
            "measured = {} predicted = {} {}",
            v.measured,
            v.predicted,
            if v.passed { "match" } else { "MISMATCH" }
        );
        if !v.passed {
            bail!("measured MAC count differs from the closed form");
        }
    }
    Ok(())
}

fn ablate(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, "ablation")?;
    let data = cfg.data.dataset().generate()?;
    let table = run_ablation(&cfg, &data)?;
    let text = table.to_text();
    print!("{text}");
    fs::write(dir.join("table.txt"), format!("{text}\n# config\n{}", cfg.snapshot()))?;
    write_report(&dir.join("table.json"), &cfg, &table)?;
    fs::write(dir.join("dice.svg"), table.dice_svg())?;
    fs::write(dir.join("f1_curves.svg"), table.f1_curve_svg())?;
    Ok(())
}

fn selftest(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let report = run_selftest(cfg.train.seed);
    print!("{}", report.to_text());
    if !report.passed() {
        bail!("self-test failed");
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Train {
            common,
            data,
            resume,
            epochs,
        } => train(&common, &data, resume.as_deref(), epochs),
        Command::Predict {
            common,
            checkpoint,
            input,
        } => predict(&common, &checkpoint, &input),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => eval(&common, &checkpoint, &data, &split, None),
        Command::CrossEval {
            common,
            checkpoint,
            data,
            mapping,
            split,
        } => eval(&common, &checkpoint, &data, &split, Some(&mapping)),
        Command::Profile {
            common,
            d,
            h,
            w,
            c,
            m,
            n,
            k,
            measure,
        } => profile(&common, CostDims { d, h, w, c, m, n, k }, measure),
        Command::Ablate { common } => ablate(&common),
        Command::Selftest { common } => selftest(&common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
