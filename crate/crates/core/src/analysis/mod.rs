//! Parameter and FLOPs accounting, class activation maps and latency
//! benchmarks.

mod bench;
mod cam;
mod cost;

pub use bench::{
    benchmark_fused_vs_unfused, benchmark_inference, latency_stats, BenchReport, LatencyStats, MIN_RUNS,
};
pub use cam::{
    cam, cam_raw, normalize_map, weighted_feature_sum, write_heatmap_pgm, write_heatmap_ppm, CamMap, COLORMAP,
};
pub use cost::{count_flops, count_params, CostReport, LayerCost, COST_HEADER};

#[cfg(test)]
mod tests;
