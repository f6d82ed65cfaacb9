//! Runs a grid of train-and-evaluate experiments.

use std::fmt;
use std::path::Path;

use crate::analysis::{benchmark_inference, count_flops, count_params};
use crate::data::{ViewSet, Wavelength};
use crate::error::{invalid, Result};
use crate::models::{Arch, Fusion, Model, ModelConfig};
use crate::nn::Phase;
use crate::reparam::fuse_model;
use crate::util::derive_seed;

use super::{evaluate, format_wavelengths, prepare, train, TrainConfig};

const CELL_TAG: u64 = 3;

/// One experiment: an architecture fed a wavelength subset and fused with
/// one operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationCell {
    pub arch: Arch,
    pub wavelengths: Vec<Wavelength>,
    pub fusion: Fusion,
}

impl AblationCell {
    pub fn new(arch: Arch, wavelengths: &[Wavelength], fusion: Fusion) -> Self {
        Self {
            arch,
            wavelengths: wavelengths.to_vec(),
            fusion,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.arch)
            .with_views(self.wavelengths.len())
            .with_fusion(self.fusion)
    }
}

impl fmt::Display for AblationCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}] {}", self.arch, format_wavelengths(&self.wavelengths), self.fusion)
    }
}

/// Seed of the `index`-th cell, derived from the master seed.
pub fn cell_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, &[CELL_TAG, index as u64])
}

/// Outcome of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    pub acc: f64,
    pub avg_acc: f64,
    pub macro_f1: f64,
    pub params: u64,
    pub flops: u64,
    /// Mean single-sample latency of the fused model; `None` when not
    /// measured.
    pub latency_ms: Option<f64>,
    /// `None` on success, otherwise the error that stopped the cell.
    pub failure: Option<String>,
}

impl AblationRow {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

pub const RESULTS_HEADER: [&str; 11] = [
    "arch",
    "wavelengths",
    "fusion",
    "seed",
    "acc",
    "avg_acc",
    "macro_f1",
    "params",
    "flops",
    "latency_ms",
    "status",
];

/// Options of [`ablation_run`] beyond the training recipe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationOptions {
    /// Timed inference runs per cell; 0 skips the latency column.
    pub latency_runs: usize,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            latency_runs: crate::analysis::MIN_RUNS,
        }
    }
}

fn run_cell(cell: &AblationCell, seed: u64, cfg: &TrainConfig, train_set: &[&ViewSet], test_set: &[&ViewSet], opts: &AblationOptions) -> Result<AblationRow> {
    let cfg = TrainConfig {
        seed,
        wavelengths: cell.wavelengths.clone(),
        fusion: cell.fusion,
        ..cfg.clone()
    };
    let model = Model::new(cell.model_config())?;
    let tr = prepare(train_set, &cell.wavelengths, cfg.image_size)?;
    let te = prepare(test_set, &cell.wavelengths, cfg.image_size)?;
    let outcome = train(&cfg, &model, model.init(seed)?, &tr, None, |_| {})?;
    let (_, report) = evaluate(&model, &outcome.store, Phase::Training, &te, cfg.batch_size)?;
    let input = model.input_shape(1, cfg.image_size);
    let flops = count_flops(&model, &outcome.store, Phase::Training, input)?.total_flops;
    let latency_ms = if opts.latency_runs > 0 {
        let fused = fuse_model(&model, &outcome.store)?;
        Some(benchmark_inference(&model, &fused.store, Phase::Inference, input, 1, opts.latency_runs)?.mean_ms)
    } else {
        None
    };
    Ok(AblationRow {
        cell: cell.clone(),
        seed,
        acc: report.acc,
        avg_acc: report.avg_acc,
        macro_f1: report.macro_f1,
        params: count_params(&outcome.store).total_params,
        flops,
        latency_ms,
        failure: None,
    })
}

/// Trains and evaluates every cell with `cfg`'s recipe. Cell `i` trains
/// with seed [`cell_seed`]`(cfg.seed, i)`; a failing cell is recorded and
/// the grid continues. `on_row` sees each row as it completes.
pub fn ablation_run(
    grid: &[AblationCell],
    cfg: &TrainConfig,
    train_set: &[&ViewSet],
    test_set: &[&ViewSet],
    opts: &AblationOptions,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(invalid("empty ablation grid"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (i, cell) in grid.iter().enumerate() {
        let seed = cell_seed(cfg.seed, i);
        let row = run_cell(cell, seed, cfg, train_set, test_set, opts).unwrap_or_else(|e| AblationRow {
            cell: cell.clone(),
            seed,
            acc: 0.0,
            avg_acc: 0.0,
            macro_f1: 0.0,
            params: 0,
            flops: 0,
            latency_ms: None,
            failure: Some(e.to_string()),
        });
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Results CSV with [`RESULTS_HEADER`]. Wavelength lists are joined with
/// `+`.
pub fn results_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.cell.arch.name().to_string(),
            format_wavelengths(&r.cell.wavelengths).replace(',', "+"),
            r.cell.fusion.name().to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.acc),
            format!("{:.6}", r.avg_acc),
            format!("{:.6}", r.macro_f1),
            r.params.to_string(),
            r.flops.to_string(),
            r.latency_ms.map(|l| format!("{l:.3}")).unwrap_or_default(),
            match &r.failure {
                None => "ok".to_string(),
                Some(e) => format!("failed: {e}"),
            },
        ])?;
    }
    w.into_inner().map_err(|e| invalid(format!("results buffer: {e}")))
}

pub fn write_results_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    crate::util::write_atomic(path, &results_csv(rows)?)
}
