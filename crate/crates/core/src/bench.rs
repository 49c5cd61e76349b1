//! Parameter, FLOP and latency accounting.
//!
//! FLOPs are `2 × MACs`, read from the multiply-accumulate trace of a recorded
//! forward pass. Haar transforms count as their four stride-2 depthwise 2×2
//! convolutions.

use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::param::ParamStore;
use crate::tensor::{Shape4, Tensor4};
use crate::zoo::{SegModel, Variant};

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_RUNS: usize = 100;
pub const MIN_RUNS: usize = 30;
pub const FLOPS_CONVENTION: &str = "2*MACs";

/// Trainable scalar count.
pub fn count_params(store: &ParamStore) -> usize {
    store.trainable_count()
}

/// `2 × MACs` of everything recorded on `g`.
pub fn graph_flops(g: &Graph) -> u64 {
    2 * g.total_macs()
}

fn bench_input(hw: usize) -> Tensor4 {
    Tensor4::full(Shape4::new(1, 3, hw, hw), 0.5)
}

/// Forward FLOPs of one `hw × hw` frame.
pub fn estimate_flops(model: &SegModel, hw: usize) -> Result<u64> {
    let mut g = Graph::new();
    let x = g.input(bench_input(hw));
    model.forward_graph(&mut g, x)?;
    Ok(graph_flops(&g))
}

/// `1000 / ms`.
pub fn fps_from_ms(ms: f64) -> f64 {
    1000.0 / ms
}

pub fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Latency {
    pub inference_ms: f64,
    pub fps: f64,
}

/// Mean wall-clock forward time per frame over `runs` after `warmup` passes.
pub fn measure_latency(model: &SegModel, hw: usize, warmup: usize, runs: usize) -> Result<Latency> {
    if runs < MIN_RUNS {
        return Err(Error::InvalidArgument(format!("at least {MIN_RUNS} measured runs are required, got {runs}")));
    }
    let x = bench_input(hw);
    for _ in 0..warmup {
        black_box(model.forward(&x)?);
    }
    let start = Instant::now();
    for _ in 0..runs {
        black_box(model.forward(black_box(&x))?);
    }
    let inference_ms = start.elapsed().as_secs_f64() * 1000.0 / runs as f64;
    Ok(Latency {
        inference_ms,
        fps: fps_from_ms(inference_ms),
    })
}

/// One efficiency row, plus exact counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    #[serde(rename = "Model Variants")]
    pub model: String,
    #[serde(rename = "Parameters (M)")]
    pub params_m: f64,
    #[serde(rename = "GFLOPS")]
    pub gflops: f64,
    #[serde(rename = "Inference Speed (ms)")]
    pub inference_ms: f64,
    #[serde(rename = "FPS")]
    pub fps: f64,
    pub variant: &'static str,
    pub parameters: usize,
    pub flops: u64,
    /// GFLOPS minus the baseline's, when the baseline is in the same report.
    pub gflops_delta_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchTable {
    pub input_size: usize,
    pub warmup: usize,
    pub runs: usize,
    pub flops_convention: &'static str,
    pub rows: Vec<BenchReport>,
}

pub fn bench_model(model: &SegModel, hw: usize, warmup: usize, runs: usize) -> Result<BenchReport> {
    let parameters = count_params(&model.store);
    let flops = estimate_flops(model, hw)?;
    let lat = measure_latency(model, hw, warmup, runs)?;
    Ok(BenchReport {
        model: model.variant().display_name().to_string(),
        params_m: round3(parameters as f64 / 1e6),
        gflops: flops as f64 / 1e9,
        inference_ms: lat.inference_ms,
        fps: lat.fps,
        variant: model.variant().name(),
        parameters,
        flops,
        gflops_delta_vs_baseline: None,
    })
}

/// Benchmarks each model and fills in the FLOP delta against the baseline row.
pub fn bench_table(models: &[SegModel], hw: usize, warmup: usize, runs: usize) -> Result<BenchTable> {
    let mut rows = models
        .iter()
        .map(|m| bench_model(m, hw, warmup, runs))
        .collect::<Result<Vec<_>>>()?;
    if let Some(base) = rows.iter().find(|r| r.variant == Variant::Baseline.name()).map(|r| r.gflops) {
        for r in &mut rows {
            r.gflops_delta_vs_baseline = Some(r.gflops - base);
        }
    }
    Ok(BenchTable {
        input_size: hw,
        warmup,
        runs,
        flops_convention: FLOPS_CONVENTION,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_relation() {
        assert_eq!(fps_from_ms(1000.0), 1.0);
        assert_eq!(round3(fps_from_ms(8.363)), 119.574);
    }

    #[test]
    fn empty_store_has_no_params() {
        assert_eq!(count_params(&ParamStore::new()), 0);
    }
}
