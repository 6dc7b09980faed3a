//! Wall-clock sampling benchmark.

use std::time::Instant;

use crate::accounting::generator_costs;
use crate::diffusion::{sample, DiffusionSchedule, GeneratorDenoiser};
use crate::error::{Error, Result};
use crate::networks::Generator;
use crate::nn::ParamStore;

pub const BENCH_HEADER: &str = "config,resolution,steps,params,flops,mem,t_mean_s,t_p50_s,t_p95_s";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub config: String,
    /// Image side length.
    pub resolution: usize,
    pub steps: usize,
    pub params: usize,
    /// Analytic FLOPs to sample one image (all steps).
    pub flops: u64,
    /// Analytic f32 bytes of one generator evaluation.
    pub mem: u64,
    pub batch: usize,
    /// Per-batch wall-clock seconds of every trial.
    pub times: Vec<f64>,
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

impl BenchResult {
    pub fn mean(&self) -> f64 {
        self.times.iter().sum::<f64>() / self.times.len() as f64
    }

    pub fn p50(&self) -> f64 {
        percentile(&self.times, 50.0)
    }

    pub fn p95(&self) -> f64 {
        percentile(&self.times, 95.0)
    }

    pub fn per_image_mean(&self) -> f64 {
        self.mean() / self.batch as f64
    }

    /// One CSV row under [`BENCH_HEADER`]; times are per batch.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.config,
            self.resolution,
            self.steps,
            self.params,
            self.flops,
            self.mem,
            self.mean(),
            self.p50(),
            self.p95()
        )
    }
}

/// Times `trials` sampling runs of `batch` images (after one warm-up run).
pub fn bench_sampling(
    name: &str,
    generator: &Generator,
    params: &ParamStore,
    sched: &DiffusionSchedule,
    batch: usize,
    trials: usize,
    seed: u64,
) -> Result<BenchResult> {
    if batch == 0 || trials == 0 {
        return Err(Error::InvalidArgument("bench needs batch > 0 and trials > 0".into()));
    }
    let spec = &generator.spec;
    let den = GeneratorDenoiser { generator, params };
    let r = spec.resolution();
    let shape = [batch, spec.in_channels(), r, r];
    sample(&den, sched, &shape, seed)?;
    let mut times = Vec::with_capacity(trials);
    for i in 0..trials {
        let t0 = Instant::now();
        sample(&den, sched, &shape, seed.wrapping_add(i as u64 + 1))?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let costs = generator_costs(spec);
    Ok(BenchResult {
        config: name.to_string(),
        resolution: spec.image_resolution,
        steps: sched.steps,
        params: params.count(),
        flops: costs.flops * sched.steps as u64,
        mem: costs.memory_bytes(),
        batch,
        times,
    })
}
