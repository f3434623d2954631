//! Sampling-strategy and classification-head sweeps at a fixed step budget.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{znormalize, GeneratedDataset, Split};
use crate::error::{Error, Result};
use crate::infer::{sliding_window_predict, EvaluationSummary};
use crate::interaction::HeadKind;
use crate::metrics::segmentation_metrics;
use crate::plot::{bar_chart, line_chart};
use crate::train::{fit, FitOptions, LossRecord, SamplingStrategy, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub strategy: SamplingStrategy,
    /// `None` for the no-sampling strategy.
    pub ratio: Option<f64>,
    pub head: HeadKind,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let s = match self.strategy {
            SamplingStrategy::Cas => "cas",
            SamplingStrategy::Random => "random",
            SamplingStrategy::None => "none",
        };
        let h = match self.head {
            HeadKind::Cosine => "cosine",
            HeadKind::Linear => "linear",
        };
        match self.ratio {
            Some(r) => format!("{s}@{r}/{h}"),
            None => format!("{s}/{h}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellMetrics {
    pub mean_dice: Option<f64>,
    pub mean_nsd: Option<f64>,
    pub mean_hd95: Option<f64>,
    pub losses: Vec<LossRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: AblationCell,
    /// Error text when training or evaluation failed.
    pub result: std::result::Result<CellMetrics, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub steps: u64,
    pub rows: Vec<CellResult>,
}

/// Expands the configured grid in strategy, ratio, head order.
pub fn ablation_cells(cfg: &RunConfig) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &strategy in &cfg.bench.strategies {
        let ratios: Vec<Option<f64>> = match strategy {
            SamplingStrategy::None => vec![None],
            _ => cfg.bench.ratios.iter().copied().map(Some).collect(),
        };
        for ratio in ratios {
            for &head in &cfg.bench.heads {
                cells.push(AblationCell { strategy, ratio, head });
            }
        }
    }
    cells
}

/// The run configuration a single cell trains with.
pub fn cell_config(cfg: &RunConfig, cell: &AblationCell) -> RunConfig {
    let mut c = cfg.clone();
    c.train.sampling = cell.strategy;
    if let Some(r) = cell.ratio {
        c.train.sample_ratio = r;
    }
    c.interaction.head = cell.head;
    c.train.epochs = cfg.bench.steps.div_ceil(cfg.train.steps_per_epoch);
    c
}

/// Trains one cell from scratch and scores it on the test split, or on the
/// training split when the dataset has no test volumes.
pub fn run_cell(cfg: &RunConfig, data: &GeneratedDataset, cell: &AblationCell) -> Result<CellMetrics> {
    let c = cell_config(cfg, cell);
    let train = data
        .split(Split::Train)
        .into_iter()
        .map(|(v, l)| Ok((znormalize(&v)?, l)))
        .collect::<Result<Vec<_>>>()?;
    let bank = c.text_bank(&data.class_names, &data.adjacency)?;
    let mut trainer = Trainer::new(c.model(), c.train.clone(), &bank)?;
    let opts = FitOptions {
        max_steps: Some(cfg.bench.steps),
        ..FitOptions::default()
    };
    let report = fit(&mut trainer, &train, &opts)?;
    let mut eval = data.split(Split::Test);
    if eval.is_empty() {
        eval = data.split(Split::Train);
    }
    let mut reports = Vec::new();
    for (i, (v, l)) in eval.iter().enumerate() {
        let pred = sliding_window_predict(&trainer.model, &znormalize(v)?, &c.eval.inference())?;
        reports.push(segmentation_metrics(
            &format!("volume-{i}"),
            &pred.labels,
            l,
            v.spacing(),
            &data.class_names,
            &c.eval.metrics(),
        )?);
    }
    let summary = EvaluationSummary::from_reports(reports);
    Ok(CellMetrics {
        mean_dice: summary.mean_dice,
        mean_nsd: summary.mean_nsd,
        mean_hd95: summary.mean_hd95,
        losses: report.records,
    })
}

/// Runs every grid cell; a failing cell is recorded and the sweep continues.
pub fn run_ablation(cfg: &RunConfig, data: &GeneratedDataset) -> Result<AblationTable> {
    cfg.validate()?;
    if data.split(Split::Train).is_empty() {
        return Err(Error::InvalidArgument("ablation needs training volumes".into()));
    }
    let rows = ablation_cells(cfg)
        .into_iter()
        .map(|cell| {
            log::info!("ablation cell {}", cell.label());
            let result = run_cell(cfg, data, &cell).map_err(|e| {
                log::warn!("ablation cell {} failed: {e}", cell.label());
                e.to_string()
            });
            CellResult { cell, result }
        })
        .collect();
    Ok(AblationTable {
        steps: cfg.bench.steps,
        rows,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl AblationTable {
    pub fn find(&self, strategy: SamplingStrategy, ratio: Option<f64>, head: HeadKind) -> Option<&CellResult> {
        self.rows
            .iter()
            .find(|r| r.cell.strategy == strategy && r.cell.ratio == ratio && r.cell.head == head)
    }

    /// Fixed-width text table, one row per cell.
    pub fn to_text(&self) -> String {
        let mut out = format!("# steps per cell: {}\n", self.steps);
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:<7} {:>8} {:>8} {:>8} {:>10}",
            "strategy", "ratio", "head", "dice", "nsd", "hd95", "final_f1"
        );
        for r in &self.rows {
            let strategy = format!("{:?}", r.cell.strategy).to_lowercase();
            let ratio = r.cell.ratio.map_or_else(|| "-".into(), |x| format!("{x}"));
            let head = format!("{:?}", r.cell.head).to_lowercase();
            match &r.result {
                Ok(m) => {
                    let f1 = m.losses.last().map(|l| l.f1);
                    let _ = writeln!(
                        out,
                        "{strategy:<10} {ratio:>6} {head:<7} {:>8} {:>8} {:>8} {:>10}",
                        fmt_opt(m.mean_dice),
                        fmt_opt(m.mean_nsd),
                        fmt_opt(m.mean_hd95),
                        fmt_opt(f1)
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{strategy:<10} {ratio:>6} {head:<7} FAILED: {e}");
                }
            }
        }
        out
    }

    pub fn dice_svg(&self) -> String {
        let bars: Vec<(String, f64)> = self
            .rows
            .iter()
            .map(|r| {
                let v = r.result.as_ref().ok().and_then(|m| m.mean_dice).unwrap_or(f64::NAN);
                (r.cell.label(), v)
            })
            .collect();
        bar_chart("Mean Dice per cell", &bars)
    }

    pub fn f1_curve_svg(&self) -> String {
        let series: Vec<(String, Vec<(f64, f64)>)> = self
            .rows
            .iter()
            .filter_map(|r| {
                let m = r.result.as_ref().ok()?;
                Some((r.cell.label(), m.losses.iter().map(|l| (l.step as f64, l.f1)).collect()))
            })
            .collect();
        line_chart("F1 loss during training", "step", &series)
    }
}
