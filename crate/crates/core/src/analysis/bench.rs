//! Single-worker inference latency measurement.

use std::fmt;
use std::time::Instant;

use crate::autograd::ParamStore;
use crate::error::{invalid, Result};
use crate::models::Model;
use crate::nn::Phase;
use crate::reparam::fuse_model;
use crate::tensor::{Shape, Tensor};

/// Fewest timed runs accepted.
pub const MIN_RUNS: usize = 10;

/// Wall-clock statistics over the timed runs, in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub runs: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl fmt::Display for LatencyStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mean {:.3} ms, p50 {:.3} ms, p95 {:.3} ms over {} runs",
            self.mean_ms, self.p50_ms, self.p95_ms, self.runs
        )
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn latency_stats(samples_ms: &[f64]) -> Result<LatencyStats> {
    if samples_ms.is_empty() {
        return Err(invalid("no latency samples"));
    }
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        runs: s.len(),
        mean_ms: s.iter().sum::<f64>() / s.len() as f64,
        p50_ms: percentile(&s, 50.0),
        p95_ms: percentile(&s, 95.0),
    })
}

/// Times `runs` eval-mode forward passes on one batch of shape `input` per
/// view, after `warmup` untimed passes, on a single worker thread.
pub fn benchmark_inference(
    model: &Model,
    store: &ParamStore<f32>,
    phase: Phase,
    input: Shape,
    warmup: usize,
    runs: usize,
) -> Result<LatencyStats> {
    if runs < MIN_RUNS {
        return Err(invalid(format!("benchmark needs at least {MIN_RUNS} runs, got {runs}")));
    }
    let views: Vec<Tensor<f32>> = (0..model.config.views)
        .map(|v| Tensor::from_fn(input, |n, c, y, x| ((n + c + y * 7 + x * 3 + v) % 11) as f32 / 11.0 - 0.5))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| invalid(format!("benchmark thread pool: {e}")))?;
    pool.install(|| {
        for _ in 0..warmup {
            model.predict(store, phase, &views)?;
        }
        let mut samples = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t = Instant::now();
            std::hint::black_box(model.predict(store, phase, &views)?);
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
        latency_stats(&samples)
    })
}

/// Latency of the training-phase model and of its fused counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub unfused: LatencyStats,
    pub fused: LatencyStats,
}

impl BenchReport {
    /// Fused mean over unfused mean.
    pub fn ratio(&self) -> f64 {
        self.fused.mean_ms / self.unfused.mean_ms
    }

    /// Whether fusion made inference slower, which is worth flagging but
    /// can happen within timing noise.
    pub fn fused_slower(&self) -> bool {
        self.fused.mean_ms > self.unfused.mean_ms
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "unfused  {}", self.unfused)?;
        writeln!(f, "fused    {}", self.fused)?;
        write!(f, "ratio    {:.3}", self.ratio())?;
        if self.fused_slower() {
            write!(f, "\nwarning: fused model measured slower than unfused")?;
        }
        Ok(())
    }
}

/// Benchmarks a training-phase store and the model fused from it.
pub fn benchmark_fused_vs_unfused(
    model: &Model,
    store: &ParamStore<f32>,
    input: Shape,
    warmup: usize,
    runs: usize,
) -> Result<BenchReport> {
    let fused = fuse_model(model, store)?;
    Ok(BenchReport {
        unfused: benchmark_inference(model, store, Phase::Training, input, warmup, runs)?,
        fused: benchmark_inference(model, &fused.store, Phase::Inference, input, warmup, runs)?,
    })
}
