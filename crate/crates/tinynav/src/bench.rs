//! Single-inference latency measurements.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use tinynav_core::model::INPUT_LEN;
use tinynav_core::sim::InferenceEngine;

use crate::error::{Error, Result};

pub const WARMUP: usize = 10;
pub const MIN_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Float,
    Int8,
}

impl std::str::FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "float" => Ok(Engine::Float),
            "int8" => Ok(Engine::Int8),
            _ => Err(format!("unknown engine {s:?} (expected float or int8)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub engine: Engine,
    pub iterations: usize,
    pub median_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
    pub fps_sustainable: f64,
}

impl LatencyReport {
    /// Summarizes per-inference wall times in microseconds.
    pub fn from_samples(engine: Engine, samples: &[f64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        // Nearest-rank percentile.
        let p95 = sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            engine,
            iterations: n,
            median_us: median,
            p95_us: p95.max(median),
            max_us: sorted[n - 1],
            fps_sustainable: 1e6 / median.max(1e-3),
        }
    }
}

/// A fixed, deterministic corridor-like window used as benchmark input.
pub fn bench_window() -> Vec<u8> {
    (0..INPUT_LEN).map(|i| (40 + (i / 20 % 24) * 8 + i % 20) as u8).collect()
}

/// Times `iterations` single inferences after [`WARMUP`] untimed runs.
pub fn bench<E: InferenceEngine + ?Sized>(engine: &E, kind: Engine, iterations: usize) -> Result<LatencyReport> {
    if iterations < MIN_ITERATIONS {
        return Err(Error::Other(format!("bench needs at least {MIN_ITERATIONS} iterations, got {iterations}")));
    }
    let window = bench_window();
    for _ in 0..WARMUP {
        std::hint::black_box(engine.infer(&window)?);
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        std::hint::black_box(engine.infer(std::hint::black_box(&window))?);
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    Ok(LatencyReport::from_samples(kind, &samples))
}
