use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{area_attention_kernel, naive_attention, tiled_attention_heads};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Scale};
use crate::nn::Ctx;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MIN_REPS: usize = 20;
pub const MIN_WARMUP: usize = 5;
pub const DEFAULT_TILE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Naive,
    Area,
    Tiled,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(KernelKind::Naive),
            "area" => Ok(KernelKind::Area),
            "tiled" => Ok(KernelKind::Tiled),
            other => Err(Error::Config(format!("unknown kernel '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionPoint {
    pub n: usize,
    pub h: usize,
    pub d: usize,
    pub l: usize,
    pub kernel: KernelKind,
}

/// One row of benchmark output. Attention fields are empty for model rows
/// and vice versa; skipped rows carry only the configuration and a status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub label: String,
    pub kernel: Option<KernelKind>,
    pub n: Option<usize>,
    pub h: Option<usize>,
    pub d: Option<usize>,
    pub l: Option<usize>,
    pub scale: Option<String>,
    pub input_size: Option<usize>,
    pub threads: usize,
    pub reps: usize,
    pub warmup: usize,
    pub median_ms: Option<f64>,
    pub p5_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    /// runs per second at the median
    pub throughput: Option<f64>,
    pub status: String,
}

/// Linear-interpolated percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn check_reps(reps: usize, warmup: usize) -> Result<()> {
    if reps < MIN_REPS || warmup < MIN_WARMUP {
        return Err(Error::Bench(format!(
            "need at least {MIN_REPS} repetitions after {MIN_WARMUP} warmup runs, got {reps} after {warmup}"
        )));
    }
    Ok(())
}

/// Time `f` and return `(median, p5, p95)` in milliseconds.
pub fn time_runs(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64, f64)> {
    check_reps(reps, warmup)?;
    for _ in 0..warmup {
        f()?;
    }
    let mut ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    Ok((percentile(&ms, 0.5), percentile(&ms, 0.05), percentile(&ms, 0.95)))
}

fn attention_row(p: &AttentionPoint, reps: usize, warmup: usize) -> BenchResult {
    BenchResult {
        label: format!("attention/{:?}", p.kernel).to_lowercase(),
        kernel: Some(p.kernel),
        n: Some(p.n),
        h: Some(p.h),
        d: Some(p.d),
        l: Some(p.l),
        scale: None,
        input_size: None,
        threads: 1,
        reps,
        warmup,
        median_ms: None,
        p5_ms: None,
        p95_ms: None,
        throughput: None,
        status: "ok".into(),
    }
}

/// Benchmark fp32 attention kernels on seeded random `[n, h*d]` inputs.
/// The tiled kernel is checked against the naive one before timing.
pub fn bench_attention(grid: &[AttentionPoint], reps: usize, warmup: usize, seed: u64) -> Result<Vec<BenchResult>> {
    check_reps(reps, warmup)?;
    let mut out = Vec::with_capacity(grid.len());
    for p in grid {
        let mut row = attention_row(p, reps, warmup);
        if p.l == 0 || p.n % p.l != 0 {
            log::warn!("skipping n={} L={}: tokens do not split into equal areas", p.n, p.l);
            row.status = format!("skipped: n % L != 0 (n={}, L={})", p.n, p.l);
            out.push(row);
            continue;
        }
        let mut rng = Rng::seed(seed);
        let shape = [p.n, p.h * p.d];
        let (q, k, v): (Tensor<f32>, Tensor<f32>, Tensor<f32>) = (
            rng.normal_tensor(&shape, 1.0),
            rng.normal_tensor(&shape, 1.0),
            rng.normal_tensor(&shape, 1.0),
        );
        if p.kernel == KernelKind::Tiled {
            let (a, _) = tiled_attention_heads(&q, &k, &v, p.h, DEFAULT_TILE)?;
            let (b, _) = naive_attention(&q, &k, &v, p.h)?;
            let diff = a.max_abs_diff(&b);
            if diff > 1e-4 {
                return Err(Error::Bench(format!("tiled kernel disagrees with naive by {diff}")));
            }
        }
        let (median, p5, p95) = time_runs(reps, warmup, || {
            match p.kernel {
                KernelKind::Naive => naive_attention(&q, &k, &v, p.h)?,
                KernelKind::Area => area_attention_kernel(&q, &k, &v, p.h, p.l)?,
                KernelKind::Tiled => tiled_attention_heads(&q, &k, &v, p.h, DEFAULT_TILE)?,
            };
            Ok(())
        })?;
        row.median_ms = Some(median);
        row.p5_ms = Some(p5);
        row.p95_ms = Some(p95);
        row.throughput = Some(1e3 / median);
        out.push(row);
    }
    Ok(out)
}

/// Inference latency of a freshly initialised fp32 model on a seeded image.
pub fn bench_model(scale: Scale, input_size: usize, reps: usize, warmup: usize, seed: u64) -> Result<BenchResult> {
    check_reps(reps, warmup)?;
    let mut cfg = ModelConfig::new(scale);
    cfg.input_size = input_size;
    let model: Model<f32> = Model::new(cfg, seed)?;
    let x: Tensor<f32> = Rng::seed(seed).uniform_tensor(&[1, 3, input_size, input_size], 0.0, 1.0);
    let ctx = Ctx::eval();
    let (median, p5, p95) = time_runs(reps, warmup, || model.forward(&x, &ctx).map(|_| ()))?;
    Ok(BenchResult {
        label: format!("model/{scale}"),
        kernel: None,
        n: None,
        h: None,
        d: None,
        l: None,
        scale: Some(scale.to_string()),
        input_size: Some(input_size),
        threads: 1,
        reps,
        warmup,
        median_ms: Some(median),
        p5_ms: Some(p5),
        p95_ms: Some(p95),
        throughput: Some(1e3 / median),
        status: "ok".into(),
    })
}

pub fn bench_to_csv(rows: &[BenchResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

pub fn bench_from_csv(text: &str) -> Result<Vec<BenchResult>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|row| row.map_err(|e| Error::Report(e.to_string())))
        .collect()
}

pub fn write_bench_csv(rows: &[BenchResult], path: &Path) -> Result<()> {
    fs::write(path, bench_to_csv(rows)?).map_err(|e| Error::io(path, e))
}
