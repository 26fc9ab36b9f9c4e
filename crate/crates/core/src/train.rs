//! Head-only transfer learning on frozen backbone features, evaluation, and the
//! repeated-run protocol.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment, AugmentConfig};
use crate::dataset::{DatasetIndex, SplitIndex};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{Classifier, MobileNetV2, FEATURE_DIM};
use crate::ops::{linear_backward, softmax_xent, LinearGrad};
use crate::preprocess::{main_transform, ImageRgb8, PreprocConfig};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Matrix, Tensor};

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_AUGMENT: u64 = 0x4155_4731;
const TAG_HEAD: u64 = 0x4845_4144;
const TAG_RUN: u64 = 0x5255_4E53;

/// Images pushed through the backbone at once while extracting features.
const FEATURE_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub batch_train: usize,
    pub batch_val: usize,
    pub batch_eval: usize,
    pub seed: u64,
    /// Apply the augmenting transformation to training images.
    pub augment: bool,
    /// Number of distinct augmentation draws per image, cycled over epochs.
    /// Zero draws a fresh augmentation every epoch.
    pub augment_variants: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            epochs: 30,
            lr_step: 10,
            lr_gamma: 0.1,
            batch_train: 64,
            batch_val: 128,
            batch_eval: 128,
            seed: 0,
            augment: true,
            augment_variants: 0,
        }
    }
}

impl TrainConfig {
    /// `lr0 = 0` is accepted as a no-op training run.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be non-negative and finite");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma < 1.0) {
            return bad("lr_gamma must be in (0, 1)");
        }
        if self.lr_step == 0 {
            return bad("lr_step must be at least 1");
        }
        if self.batch_train == 0 || self.batch_val == 0 || self.batch_eval == 0 {
            return bad("batch sizes must be at least 1");
        }
        Ok(())
    }
}

/// Step schedule: `lr0 * gamma^floor(epoch / step)`, by repeated multiplication
/// so that 1e-3 steps to exactly 1e-4 and 1e-5.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.lr0;
    for _ in 0..epoch / cfg.lr_step {
        lr *= cfg.lr_gamma;
    }
    lr
}

/// Momentum buffers for the classifier weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl SgdState {
    pub fn new(head: &Classifier) -> Self {
        SgdState {
            weight: vec![0.0; head.weight.data().len()],
            bias: vec![0.0; head.bias.len()],
        }
    }

    pub fn step(&mut self, head: &mut Classifier, grad: &LinearGrad, lr: f64, cfg: &TrainConfig) -> Result<()> {
        sgd_step(head.weight.data_mut(), grad.weight.data(), &mut self.weight, lr, cfg)?;
        sgd_step(&mut head.bias, &grad.bias, &mut self.bias, lr, cfg)
    }
}

/// One SGD update with L2 weight decay and (Nesterov) momentum:
///
/// ```text
/// g' = grad + wd * param
/// v  = momentum * v + g'
/// param -= lr * (nesterov ? g' + momentum * v : v)
/// ```
///
/// Arithmetic is done in f64 per element and rounded once on store.
pub fn sgd_step(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f64, cfg: &TrainConfig) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("param {}, grad {}, velocity {}", param.len(), grad.len(), velocity.len()),
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g as f64 + cfg.weight_decay * *p as f64;
        let vel = cfg.momentum * *v as f64 + g;
        let update = if cfg.nesterov { g + cfg.momentum * vel } else { vel };
        *v = vel as f32;
        *p = (*p as f64 - lr * update) as f32;
    }
    Ok(())
}

/// Mean cross-entropy of the head on `features` and its parameter gradient.
pub fn head_gradient(head: &Classifier, features: &Matrix, labels: &[usize]) -> Result<(f32, LinearGrad)> {
    let logits = head.forward(features)?;
    let (loss, dlogits) = softmax_xent(&logits, labels)?;
    Ok((loss, linear_backward(features, &dlogits)?))
}

/// Accuracy of `head` on precomputed features, batched.
pub fn evaluate_features(head: &Classifier, features: &Matrix, labels: &[usize], batch: usize) -> Result<Metrics> {
    let mut metrics = Metrics::new(head.num_classes());
    let rows: Vec<usize> = (0..features.rows()).collect();
    for chunk in rows.chunks(batch.max(1)) {
        let predicted = head.forward(&features.gather_rows(chunk))?.argmax_rows();
        for (&i, p) in chunk.iter().zip(predicted) {
            metrics.record(labels[i], p)?;
        }
    }
    Ok(metrics)
}

/// Source of frozen features for [`fit_head`].
pub trait HeadData {
    fn train_labels(&self) -> &[usize];
    /// Features of training items `items` as seen in `epoch` (augmentation may
    /// differ per epoch).
    fn train_features(&mut self, epoch: usize, items: &[usize]) -> Result<Matrix>;
    fn validation(&mut self) -> Result<(Matrix, Vec<usize>)>;
}

/// In-memory features, used for toy problems and tests.
#[derive(Clone, Debug)]
pub struct FeatureData {
    pub train: Matrix,
    pub train_labels: Vec<usize>,
    pub val: Matrix,
    pub val_labels: Vec<usize>,
}

impl HeadData for FeatureData {
    fn train_labels(&self) -> &[usize] {
        &self.train_labels
    }

    fn train_features(&mut self, _epoch: usize, items: &[usize]) -> Result<Matrix> {
        Ok(self.train.gather_rows(items))
    }

    fn validation(&mut self) -> Result<(Matrix, Vec<usize>)> {
        Ok((self.val.clone(), self.val_labels.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained head; epoch `e` is recorded after `e` passes.
    pub epoch: usize,
    /// Rate used during this epoch's pass (for epoch 0, the first rate).
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub head: Classifier,
    pub curve: Vec<EpochRecord>,
}

/// Trains `head` with the step-scheduled SGD recipe. The validation accuracy
/// curve starts with the untrained head.
pub fn fit_head(data: &mut dyn HeadData, cfg: &TrainConfig, mut head: Classifier, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let labels = data.train_labels().to_vec();
    if labels.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let (val_x, val_y) = data.validation()?;
    if val_y.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let val_accuracy = |h: &Classifier| evaluate_features(h, &val_x, &val_y, cfg.batch_val).map(|m| m.accuracy());
    let mut state = SgdState::new(&head);
    let mut curve = vec![EpochRecord {
        epoch: 0,
        lr: lr_at(0, cfg),
        train_loss: None,
        val_accuracy: val_accuracy(&head)?,
    }];
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut stream(&[seed, TAG_SHUFFLE, epoch as u64]));
        let mut loss_sum = 0f64;
        for batch in order.chunks(cfg.batch_train) {
            let x = data.train_features(epoch, batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = head_gradient(&head, &x, &y)?;
            state.step(&mut head, &grad, lr, cfg)?;
            loss_sum += loss as f64 * batch.len() as f64;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: Some(loss_sum / labels.len() as f64),
            val_accuracy: val_accuracy(&head)?,
        };
        log::info!(
            "epoch {} lr {:e} loss {:.4} val {:.4}",
            record.epoch,
            lr,
            record.train_loss.unwrap_or(0.0),
            record.val_accuracy
        );
        curve.push(record);
    }
    Ok(RunResult { head, curve })
}

/// SHA-256 over every backbone weight and bias, used to key cached features.
pub fn backbone_fingerprint(model: &MobileNetV2) -> [u8; 32] {
    let mut h = Sha256::new();
    for layer in model.conv_layers() {
        for v in layer.weight.data().iter().chain(&layer.bias) {
            h.update(v.to_le_bytes());
        }
        h.update([layer.params.stride as u8, layer.params.padding as u8]);
    }
    h.finalize().into()
}

fn path_key(path: &Path) -> u64 {
    let digest = Sha256::digest(path.to_string_lossy().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One image to push through the backbone, with its optional augmentation draw.
#[derive(Clone, Debug)]
pub struct FeatureRequest<'a> {
    pub path: &'a Path,
    pub augment_seed: Option<u64>,
}

/// Decodes, optionally augments, preprocesses and embeds each request.
/// Rows come back in request order; results do not depend on chunking.
pub fn compute_features(
    model: &MobileNetV2,
    requests: &[FeatureRequest<'_>],
    preproc: &PreprocConfig,
    aug: &AugmentConfig,
) -> Result<Matrix> {
    let mut data = Vec::with_capacity(requests.len() * FEATURE_DIM);
    for chunk in requests.chunks(FEATURE_CHUNK) {
        let tensors = chunk
            .par_iter()
            .map(|r| {
                let img = ImageRgb8::open(r.path)?;
                let img = match r.augment_seed {
                    Some(seed) => augment(&img, aug, &mut stream(&[seed])),
                    None => img,
                };
                main_transform(&img, preproc)
            })
            .collect::<Result<Vec<Tensor>>>()?;
        data.extend(model.extract_features(&Tensor::stack(&tensors)?)?.into_data());
    }
    Matrix::from_vec(requests.len(), FEATURE_DIM, data)
}

/// Memory and optional on-disk store of embedding rows keyed by content hash.
/// Lookups return exactly the floats that were computed, so results are the
/// same with or without the cache.
#[derive(Debug, Default)]
pub struct FeatureCache {
    dir: Option<PathBuf>,
    memory: HashMap<[u8; 32], Vec<f32>>,
}

impl FeatureCache {
    pub fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(FeatureCache {
            dir,
            memory: HashMap::new(),
        })
    }

    fn file(&self, key: &[u8; 32]) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.f32", hex::encode(key))))
    }

    pub fn get(&self, key: &[u8; 32]) -> Option<Vec<f32>> {
        if let Some(v) = self.memory.get(key) {
            return Some(v.clone());
        }
        let bytes = std::fs::read(self.file(key)?).ok()?;
        if bytes.len() != FEATURE_DIM * 4 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        )
    }

    pub fn put(&mut self, key: [u8; 32], row: &[f32], keep_in_memory: bool) -> Result<()> {
        if let Some(path) = self.file(&key) {
            let tmp = path.with_extension("tmp");
            let bytes: Vec<u8> = row.iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        if keep_in_memory {
            self.memory.insert(key, row.to_vec());
        }
        Ok(())
    }
}

/// Everything a training or evaluation run needs besides its seed.
#[derive(Clone, Debug)]
pub struct RunSpec<'a> {
    pub model: &'a MobileNetV2,
    pub index: &'a DatasetIndex,
    pub train: TrainConfig,
    pub preproc: PreprocConfig,
    pub augment: AugmentConfig,
    pub cache_dir: Option<PathBuf>,
}

struct ImageData<'a> {
    model: &'a MobileNetV2,
    preproc: &'a PreprocConfig,
    augment: Option<&'a AugmentConfig>,
    variants: usize,
    run_seed: u64,
    train: Vec<(PathBuf, usize)>,
    labels: Vec<usize>,
    val: Vec<(PathBuf, usize)>,
    cache: FeatureCache,
    context: Vec<u8>,
}

impl ImageData<'_> {
    fn key(&self, path: &Path, augment_seed: Option<u64>) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(&self.context);
        h.update(path.to_string_lossy().as_bytes());
        h.update([0]);
        match augment_seed {
            Some(s) => {
                h.update([1]);
                h.update(s.to_le_bytes());
            }
            None => h.update([0]),
        }
        h.finalize().into()
    }

    fn fetch(&mut self, items: &[(&Path, Option<u64>)], keep: bool) -> Result<Matrix> {
        let keys: Vec<[u8; 32]> = items.iter().map(|(p, s)| self.key(p, *s)).collect();
        let mut rows: Vec<Option<Vec<f32>>> = keys.iter().map(|k| self.cache.get(k)).collect();
        let missing: Vec<usize> = (0..items.len()).filter(|&i| rows[i].is_none()).collect();
        if !missing.is_empty() {
            let requests: Vec<FeatureRequest> = missing
                .iter()
                .map(|&i| FeatureRequest {
                    path: items[i].0,
                    augment_seed: items[i].1,
                })
                .collect();
            let aug = self.augment.cloned().unwrap_or_else(AugmentConfig::identity);
            let computed = compute_features(self.model, &requests, self.preproc, &aug)?;
            for (r, &i) in missing.iter().enumerate() {
                self.cache.put(keys[i], computed.row(r), keep)?;
                rows[i] = Some(computed.row(r).to_vec());
            }
        }
        let data = rows.into_iter().flat_map(|r| r.expect("filled")).collect();
        Matrix::from_vec(items.len(), FEATURE_DIM, data)
    }
}

impl HeadData for ImageData<'_> {
    fn train_labels(&self) -> &[usize] {
        &self.labels
    }

    fn train_features(&mut self, epoch: usize, items: &[usize]) -> Result<Matrix> {
        let variant = match self.variants {
            0 => epoch,
            v => epoch % v,
        } as u64;
        let seed = self.run_seed;
        let augmenting = self.augment.is_some();
        let train = std::mem::take(&mut self.train);
        let requests: Vec<(&Path, Option<u64>)> = items
            .iter()
            .map(|&i| {
                let p = train[i].0.as_path();
                let s = augmenting.then(|| derive_seed(&[seed, TAG_AUGMENT, variant, path_key(p)]));
                (p, s)
            })
            .collect();
        let keep = !augmenting || self.variants > 0;
        let out = self.fetch(&requests, keep);
        drop(requests);
        self.train = train;
        out
    }

    fn validation(&mut self) -> Result<(Matrix, Vec<usize>)> {
        let val = std::mem::take(&mut self.val);
        let requests: Vec<(&Path, Option<u64>)> = val.iter().map(|(p, _)| (p.as_path(), None)).collect();
        let x = self.fetch(&requests, false);
        drop(requests);
        let labels = val.iter().map(|(_, l)| *l).collect();
        self.val = val;
        Ok((x?, labels))
    }
}

fn cache_context(model: &MobileNetV2, preproc: &PreprocConfig, augment: Option<&AugmentConfig>) -> Result<Vec<u8>> {
    let mut ctx = backbone_fingerprint(model).to_vec();
    ctx.extend(serde_json::to_vec(preproc)?);
    ctx.extend(serde_json::to_vec(&augment)?);
    Ok(ctx)
}

/// Seed of run `r` in a repeated experiment with base seed `base`.
pub fn run_seed(base: u64, r: usize) -> u64 {
    derive_seed(&[base, TAG_RUN, r as u64])
}

/// Seed used to initialize the head of a run.
pub fn head_seed(run_seed: u64) -> u64 {
    derive_seed(&[run_seed, TAG_HEAD])
}

/// Initial head of the run with seed `seed`.
pub fn initial_head(num_classes: usize, seed: u64) -> Classifier {
    Classifier::init_uniform(num_classes, head_seed(seed))
}

/// Trains a fresh head on the frozen backbone of `spec.model`: seeded shuffle,
/// augmented training features, validation accuracy after every epoch.
pub fn train_head(spec: &RunSpec<'_>, seed: u64) -> Result<RunResult> {
    spec.preproc.validate()?;
    let augment = spec.train.augment.then_some(&spec.augment);
    if let Some(a) = augment {
        a.validate()?;
    }
    let train = spec.index.training.items();
    let mut data = ImageData {
        model: spec.model,
        preproc: &spec.preproc,
        augment,
        variants: spec.train.augment_variants,
        run_seed: seed,
        labels: train.iter().map(|(_, l)| *l).collect(),
        train,
        val: spec.index.validation.items(),
        cache: FeatureCache::new(spec.cache_dir.clone())?,
        context: cache_context(spec.model, &spec.preproc, augment)?,
    };
    let head = initial_head(spec.model.num_classes(), seed);
    fit_head(&mut data, &spec.train, head, seed)
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    /// One entry per evaluated head, in input order.
    pub metrics: Vec<Metrics>,
    /// Images per second for decode, preprocessing and the backbone pass.
    pub images_per_second: f64,
}

/// Evaluates several heads on one split with a single backbone pass.
pub fn evaluate_heads(
    backbone: &MobileNetV2,
    heads: &[&Classifier],
    split: &SplitIndex,
    preproc: &PreprocConfig,
    batch: usize,
) -> Result<EvalOutcome> {
    if split.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let items = split.items();
    let requests: Vec<FeatureRequest> = items
        .iter()
        .map(|(p, _)| FeatureRequest {
            path: p,
            augment_seed: None,
        })
        .collect();
    let labels: Vec<usize> = items.iter().map(|(_, l)| *l).collect();
    let start = Instant::now();
    let features = compute_features(backbone, &requests, preproc, &AugmentConfig::identity())?;
    let secs = start.elapsed().as_secs_f64();
    let metrics = heads
        .iter()
        .map(|h| evaluate_features(h, &features, &labels, batch))
        .collect::<Result<_>>()?;
    Ok(EvalOutcome {
        metrics,
        images_per_second: images_per_second(items.len(), secs),
    })
}

/// Metrics of the full model (backbone plus its own classifier) on `split`.
pub fn evaluate(model: &MobileNetV2, split: &SplitIndex, preproc: &PreprocConfig, batch: usize) -> Result<Metrics> {
    let mut out = evaluate_heads(model, &[&model.classifier], split, preproc, batch)?;
    Ok(out.metrics.remove(0))
}

/// Rate in images per second; zero if no time elapsed.
pub fn images_per_second(images: usize, seconds: f64) -> f64 {
    if seconds > 0.0 {
        images as f64 / seconds
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub throughputs: Vec<f64>,
    pub mean_throughput: f64,
    /// `max - min` of `accuracies`.
    pub disparity: f64,
}

impl RunSummary {
    pub fn from_runs(accuracies: Vec<f64>, throughputs: Vec<f64>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::InvalidArgument("summary of zero runs".into()));
        }
        if !throughputs.is_empty() && throughputs.len() != accuracies.len() {
            return Err(Error::InvalidArgument(format!(
                "{} accuracies but {} throughputs",
                accuracies.len(),
                throughputs.len()
            )));
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(RunSummary {
            mean_accuracy: mean(&accuracies),
            mean_throughput: mean(&throughputs),
            disparity: max - min,
            accuracies,
            throughputs,
        })
    }
}

/// Result of one complete run: training plus final evaluation.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub curve: Vec<EpochRecord>,
    /// Untrained head on the evaluation split.
    pub epoch0_eval_accuracy: f64,
    pub metrics: Metrics,
    pub images_per_second: f64,
}

/// Trains a fresh head and evaluates both it and its untrained initialization
/// on the evaluation split.
pub fn full_run(spec: &RunSpec<'_>, seed: u64) -> Result<RunOutcome> {
    let result = train_head(spec, seed)?;
    let initial = initial_head(spec.model.num_classes(), seed);
    let mut eval = evaluate_heads(
        spec.model,
        &[&initial, &result.head],
        &spec.index.evaluation,
        &spec.preproc,
        spec.train.batch_eval,
    )?;
    let metrics = eval.metrics.pop().expect("two heads");
    let initial = eval.metrics.pop().expect("two heads");
    Ok(RunOutcome {
        seed,
        curve: result.curve,
        epoch0_eval_accuracy: initial.accuracy(),
        metrics,
        images_per_second: eval.images_per_second,
    })
}

/// Runs `k` independent experiments with seeds derived from `base_seed` and
/// summarizes accuracy and evaluation speed.
pub fn repeated_runs<F>(k: usize, base_seed: u64, mut run: F) -> Result<(RunSummary, Vec<RunOutcome>)>
where
    F: FnMut(u64) -> Result<RunOutcome>,
{
    if k == 0 {
        return Err(Error::InvalidArgument("repeated_runs needs k >= 1".into()));
    }
    let outcomes = (0..k).map(|r| run(run_seed(base_seed, r))).collect::<Result<Vec<_>>>()?;
    let summary = RunSummary::from_runs(
        outcomes.iter().map(|o| o.metrics.accuracy()).collect(),
        outcomes.iter().map(|o| o.images_per_second).collect(),
    )?;
    Ok((summary, outcomes))
}
