//! Throughput measurement and the resolution sweep.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::MobileNetV2;
use crate::preprocess::{main_transform, ImageRgb8, PreprocConfig};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::train::{images_per_second, repeated_runs, EpochRecord, RunOutcome, RunSummary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputConfig {
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        ThroughputConfig {
            batch: 16,
            warmup: 1,
            iters: 5,
        }
    }
}

impl ThroughputConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.warmup == 0 || self.iters < 3 {
            return Err(Error::Config(format!(
                "throughput needs batch >= 1, warmup >= 1 and iters >= 3 (got {}, {}, {})",
                self.batch, self.warmup, self.iters
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub size: usize,
    pub batch: usize,
    pub threads: usize,
    /// Median images/s of the network alone on a prepared tensor.
    pub forward_only: f64,
    /// Median images/s from decoded RGB8: resize, normalize, forward.
    pub end_to_end: f64,
    pub forward_rates: Vec<f64>,
    pub end_to_end_rates: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64())
}

fn rates<F>(cfg: &ThroughputConfig, mut iteration: F) -> Result<Vec<f64>>
where
    F: FnMut() -> Result<()>,
{
    for _ in 0..cfg.warmup {
        iteration()?;
    }
    (0..cfg.iters)
        .map(|_| timed(&mut iteration).map(|s| images_per_second(cfg.batch, s)))
        .collect()
}

/// Measures forward-only and end-to-end rates at input size `size`. Every
/// batch item is `source` (decoded once, outside the timed region).
pub fn throughput(
    model: &MobileNetV2,
    source: &ImageRgb8,
    preproc: &PreprocConfig,
    cfg: &ThroughputConfig,
) -> Result<Throughput> {
    cfg.validate()?;
    preproc.validate()?;
    let one = main_transform(source, preproc)?;
    let batch = Tensor::stack(&vec![one; cfg.batch])?;
    let forward_rates = rates(cfg, || model.forward(&batch).map(drop))?;
    let end_to_end_rates = rates(cfg, || {
        let items = (0..cfg.batch)
            .into_par_iter()
            .map(|_| main_transform(source, preproc))
            .collect::<Result<Vec<_>>>()?;
        model.forward(&Tensor::stack(&items)?).map(drop)
    })?;
    Ok(Throughput {
        size: preproc.size,
        batch: cfg.batch,
        threads: rayon::current_num_threads(),
        forward_only: median(&forward_rates),
        end_to_end: median(&end_to_end_rates),
        forward_rates,
        end_to_end_rates,
    })
}

/// Deterministic smooth-plus-noise RGB image used as the benchmark source.
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> ImageRgb8 {
    use rand::Rng;
    let mut rng = stream(&[seed]);
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f32 / width as f32, y as f32 / height as f32);
            let base = [
                200.0 * fx + 30.0,
                120.0 + 100.0 * (6.0 * fy).sin(),
                90.0 + 80.0 * (4.0 * (fx + fy)).cos(),
            ];
            for b in base {
                let v = b + rng.gen_range(-20.0..20.0f32);
                pixels.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRgb8::new(width, height, pixels).expect("consistent dimensions")
}

/// Best-effort description of the machine: CPU model, logical CPUs, OS/arch.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {cpus} logical cpus; {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

pub fn config_hash(config_json: &str) -> String {
    hex::encode(Sha256::digest(config_json.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub accuracy: f64,
    pub epoch0_eval_accuracy: f64,
    pub images_per_second: f64,
    pub curve: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub size: usize,
    pub summary: RunSummary,
    /// Confusion counts summed over all runs at this size.
    pub metrics: Metrics,
    pub runs: Vec<RunRecord>,
    pub throughput: Throughput,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl SweepCell {
    /// Validation accuracy per epoch averaged over runs.
    pub fn mean_curve(&self) -> Vec<f64> {
        let epochs = self.runs.iter().map(|r| r.curve.len()).min().unwrap_or(0);
        (0..epochs)
            .map(|e| self.runs.iter().map(|r| r.curve[e].val_accuracy).sum::<f64>() / self.runs.len() as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub hardware: String,
    pub threads: usize,
    pub config_hash: String,
    /// Flat key/value run description copied into `manifest.json`.
    pub manifest: serde_json::Map<String, serde_json::Value>,
}

impl SweepResult {
    pub fn validate(&self) -> Result<()> {
        if self.cells.windows(2).any(|w| w[0].size >= w[1].size) {
            return Err(Error::InvalidArgument("sweep sizes must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Checks that sizes are valid inputs and strictly increasing.
pub fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Config("no sweep sizes".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s < crate::model::MIN_INPUT_SIZE) {
        return Err(Error::Config(format!("sweep size {s} is below {}", crate::model::MIN_INPUT_SIZE)));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sweep sizes must be strictly increasing".into()));
    }
    Ok(())
}

/// For each size, `k` runs through `run(size, seed)` and one throughput
/// measurement through `measure(size)`. Sizes are processed sequentially and
/// every size uses the same run seeds.
pub fn resolution_sweep<R, M>(
    sizes: &[usize],
    k: usize,
    base_seed: u64,
    config_hash: &str,
    mut run: R,
    mut measure: M,
) -> Result<Vec<SweepCell>>
where
    R: FnMut(usize, u64) -> Result<RunOutcome>,
    M: FnMut(usize) -> Result<Throughput>,
{
    check_sizes(sizes)?;
    let mut cells = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let (summary, outcomes) = repeated_runs(k, base_seed, |seed| run(size, seed))?;
        let mut metrics = outcomes[0].metrics.clone();
        for o in &outcomes[1..] {
            metrics.merge(&o.metrics)?;
        }
        let throughput = measure(size)?;
        cells.push(SweepCell {
            size,
            summary,
            metrics,
            seeds: outcomes.iter().map(|o| o.seed).collect(),
            runs: outcomes
                .into_iter()
                .map(|o| RunRecord {
                    seed: o.seed,
                    accuracy: o.metrics.accuracy(),
                    epoch0_eval_accuracy: o.epoch0_eval_accuracy,
                    images_per_second: o.images_per_second,
                    curve: o.curve,
                })
                .collect(),
            throughput,
            config_hash: config_hash.to_string(),
        });
    }
    Ok(cells)
}
