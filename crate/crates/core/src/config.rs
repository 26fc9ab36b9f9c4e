//! Run configuration: one flat JSON object covering preprocessing,
//! augmentation, training, the sweep and paths.
//!
//! Layers apply in order defaults, config file, flag overrides. Unknown keys
//! are rejected at every layer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentConfig;
use crate::bench::{check_sizes, ThroughputConfig};
use crate::error::{Error, Result};
use crate::preprocess::{PreprocConfig, IMAGENET_MEAN, IMAGENET_STD};
use crate::train::TrainConfig;

pub const THREADS_ENV: &str = "MNV2_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Input size for single-size commands.
    pub size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    #[serde(flatten)]
    pub augment: AugmentConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
    pub sizes: Vec<usize>,
    pub runs: usize,
    /// Stratified subset fraction applied to every split.
    pub fraction: f64,
    pub dataset_root: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub bench_batch: usize,
    pub bench_warmup: usize,
    pub bench_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = ThroughputConfig::default();
        RunConfig {
            size: 224,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            sizes: vec![32, 64, 128, 256],
            runs: 5,
            fraction: 1.0,
            dataset_root: None,
            weights: None,
            out: PathBuf::from("out"),
            cache_dir: None,
            threads: None,
            bench_batch: bench.batch,
            bench_warmup: bench.warmup,
            bench_iters: bench.iters,
        }
    }
}

fn as_object(v: Value, origin: &str) -> Result<Map<String, Value>> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("{origin}: expected a JSON object"))),
    }
}

fn overlay(base: &mut Map<String, Value>, layer: Map<String, Value>, origin: &str) -> Result<()> {
    for (k, v) in layer {
        if !base.contains_key(&k) {
            return Err(Error::Config(format!("{origin}: unknown key '{k}'")));
        }
        if v.is_object() {
            return Err(Error::Config(format!("{origin}: key '{k}' must not be nested")));
        }
        base.insert(k, v);
    }
    Ok(())
}

/// Parses `key=value`, reading the value as JSON and falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Builds a config from defaults, an optional file and flag overrides, then
    /// validates it.
    pub fn resolve(file: Option<&Path>, overrides: Map<String, Value>) -> Result<Self> {
        let mut merged = as_object(serde_json::to_value(RunConfig::default())?, "defaults")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            overlay(&mut merged, as_object(v, &path.display().to_string())?, &path.display().to_string())?;
        }
        overlay(&mut merged, overrides, "flags")?;
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preproc(&self) -> PreprocConfig {
        self.preproc_at(self.size)
    }

    pub fn preproc_at(&self, size: usize) -> PreprocConfig {
        PreprocConfig {
            size,
            mean: self.mean,
            std: self.std,
        }
    }

    pub fn throughput(&self) -> ThroughputConfig {
        ThroughputConfig {
            batch: self.bench_batch,
            warmup: self.bench_warmup,
            iters: self.bench_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preproc().validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        check_sizes(&self.sizes)?;
        self.throughput().validate()?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} must be in (0, 1]", self.fraction)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Thread count from the config, else `MNV2_THREADS`, else `None`
    /// (one per logical CPU).
    pub fn resolved_threads(&self) -> Result<Option<usize>> {
        if self.threads.is_some() {
            return Ok(self.threads);
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(Error::Config(format!("{THREADS_ENV}='{v}' is not a positive integer"))),
            },
            Err(_) => Ok(None),
        }
    }

    /// The config as the flat key/value map recorded in manifests.
    pub fn to_map(&self) -> Result<Map<String, Value>> {
        as_object(serde_json::to_value(self)?, "config")
    }
}
