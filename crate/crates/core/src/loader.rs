//! Maps archive tensors onto the topology and folds batch norm at load time.
//!
//! Naming convention (shared with the checkpoint exporter):
//!
//! | tensor                                   | shape                     |
//! |------------------------------------------|---------------------------|
//! | `stem.conv.w`                            | `(32, 3, 3, 3)`           |
//! | `block{i}.expand.w` (blocks 1..=16)      | `(hidden, cin, 1, 1)`     |
//! | `block{i}.dw.w`                          | `(hidden, 1, 3, 3)`       |
//! | `block{i}.project.w`                     | `(cout, hidden, 1, 1)`    |
//! | `head.conv.w`                            | `(1280, 320, 1, 1)`       |
//! | `<layer>.bn_gamma/bn_beta/bn_mean/bn_var`| `(channels)`              |
//! | `classifier.w`, `classifier.b`           | `(k, 1280)`, `(k)`        |
//! | `bn_eps` (optional, default 1e-5)        | `(1)` or `()`             |

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{block_configs, Classifier, ConvLayer, MobileNetV2, FEATURE_DIM};
use crate::ops::{fold_batchnorm, BatchNorm};
use crate::tensor::{Matrix, Tensor};
use crate::weights::{ArchiveTensor, WeightArchive};

pub const DEFAULT_BN_EPS: f32 = 1e-5;
pub const BN_SUFFIXES: [&str; 4] = ["bn_gamma", "bn_beta", "bn_mean", "bn_var"];

/// Prefixes of every convolution layer, in execution order.
pub fn layer_prefixes() -> Vec<String> {
    let mut names = vec!["stem.conv".to_string()];
    for cfg in block_configs() {
        if cfg.has_expand() {
            names.push(format!("block{}.expand", cfg.index));
        }
        names.push(format!("block{}.dw", cfg.index));
        names.push(format!("block{}.project", cfg.index));
    }
    names.push("head.conv".to_string());
    names
}

/// Every backbone tensor name the loader requires.
pub fn expected_backbone_names() -> Vec<String> {
    layer_prefixes()
        .into_iter()
        .flat_map(|p| {
            std::iter::once(format!("{p}.w")).chain(BN_SUFFIXES.iter().map(move |s| format!("{p}.{s}")))
        })
        .collect()
}

fn archive_bn_eps(archive: &WeightArchive) -> Result<f32> {
    match archive.get("bn_eps") {
        None => Ok(DEFAULT_BN_EPS),
        Some(t) if t.data.len() == 1 && t.data[0] >= 0.0 && t.data[0].is_finite() => Ok(t.data[0]),
        Some(t) => Err(Error::TensorShape {
            name: "bn_eps".into(),
            expected: vec![1],
            found: t.dims.clone(),
        }),
    }
}

/// Closed-world check: all backbone tensors present, nothing unexpected, and the
/// classifier either complete or absent.
pub fn validate_names(archive: &WeightArchive) -> Result<()> {
    let expected: BTreeSet<String> = expected_backbone_names().into_iter().collect();
    for name in &expected {
        if archive.get(name).is_none() {
            return Err(Error::MissingTensor(name.clone()));
        }
    }
    for name in archive.names() {
        let known = expected.contains(name)
            || matches!(name, "bn_eps" | "classifier.w" | "classifier.b");
        if !known {
            return Err(Error::Archive(format!("unexpected tensor `{name}`")));
        }
    }
    match (archive.get("classifier.w"), archive.get("classifier.b")) {
        (Some(_), None) => Err(Error::MissingTensor("classifier.b".into())),
        (None, Some(_)) => Err(Error::MissingTensor("classifier.w".into())),
        _ => Ok(()),
    }
}

fn load_conv(archive: &WeightArchive, prefix: &str, target: &mut ConvLayer, eps: f32) -> Result<()> {
    let dims = target.weight.shape();
    let w = archive.require(&format!("{prefix}.w"), &dims)?;
    let weight = Tensor::from_vec(dims, w.data.clone())?;
    let cout = dims[0];
    let vec = |suffix: &str| -> Result<Vec<f32>> {
        Ok(archive.require(&format!("{prefix}.{suffix}"), &[cout])?.data.clone())
    };
    let bn = BatchNorm {
        gamma: vec("bn_gamma")?,
        beta: vec("bn_beta")?,
        mean: vec("bn_mean")?,
        var: vec("bn_var")?,
    };
    let (weight, bias) = fold_batchnorm(&weight, None, &bn, eps)?;
    target.weight = weight;
    target.bias = bias;
    Ok(())
}

/// Builds a model from an archive, folding every batch norm into its conv.
///
/// The archive's classifier is used when it has `num_classes` rows; otherwise the
/// head is replaced by a fresh fan-in uniform initialization from `head_seed`.
pub fn load_model(archive: &WeightArchive, num_classes: usize, head_seed: u64) -> Result<MobileNetV2> {
    validate_names(archive)?;
    let eps = archive_bn_eps(archive)?;
    let mut model = MobileNetV2::build(num_classes)?;
    load_conv(archive, "stem.conv", &mut model.stem, eps)?;
    for block in &mut model.blocks {
        let i = block.config.index;
        if let Some(expand) = block.expand.as_mut() {
            load_conv(archive, &format!("block{i}.expand"), expand, eps)?;
        }
        load_conv(archive, &format!("block{i}.dw"), &mut block.depthwise, eps)?;
        load_conv(archive, &format!("block{i}.project"), &mut block.project, eps)?;
    }
    load_conv(archive, "head.conv", &mut model.head, eps)?;
    model.classifier = match archive.get("classifier.w") {
        Some(w) if w.dims == [num_classes, FEATURE_DIM] => classifier_from_archive(archive, num_classes)?,
        Some(w) if w.dims.len() == 2 && w.dims[1] == FEATURE_DIM => {
            Classifier::init_uniform(num_classes, head_seed)
        }
        Some(w) => {
            return Err(Error::TensorShape {
                name: "classifier.w".into(),
                expected: vec![num_classes, FEATURE_DIM],
                found: w.dims.clone(),
            })
        }
        None => Classifier::init_uniform(num_classes, head_seed),
    };
    Ok(model)
}

/// Reads `classifier.w` / `classifier.b` with the given class count.
pub fn classifier_from_archive(archive: &WeightArchive, num_classes: usize) -> Result<Classifier> {
    let w = archive.require("classifier.w", &[num_classes, FEATURE_DIM])?;
    let b = archive.require("classifier.b", &[num_classes])?;
    Ok(Classifier {
        weight: Matrix::from_vec(num_classes, FEATURE_DIM, w.data.clone())?,
        bias: b.data.clone(),
    })
}

pub fn classifier_to_archive(classifier: &Classifier) -> WeightArchive {
    let mut a = WeightArchive::new();
    a.insert("classifier.w", ArchiveTensor::from(&classifier.weight));
    a.insert("classifier.b", ArchiveTensor::vector(classifier.bias.clone()));
    a
}

/// Writes an already-folded model back out with identity batch norm
/// (`gamma = 1`, `mean = 0`, `var = 1`, `eps = 0`, `beta` = folded bias), which
/// reloads bit-exactly.
pub fn model_to_archive(model: &MobileNetV2) -> WeightArchive {
    let mut a = classifier_to_archive(&model.classifier);
    a.insert("bn_eps", ArchiveTensor::scalar(0.0));
    for (prefix, layer) in layer_prefixes().iter().zip(model.conv_layers()) {
        let c = layer.out_channels();
        a.insert(format!("{prefix}.w"), ArchiveTensor::from(&layer.weight));
        a.insert(format!("{prefix}.bn_gamma"), ArchiveTensor::vector(vec![1.0; c]));
        a.insert(format!("{prefix}.bn_beta"), ArchiveTensor::vector(layer.bias.clone()));
        a.insert(format!("{prefix}.bn_mean"), ArchiveTensor::vector(vec![0.0; c]));
        a.insert(format!("{prefix}.bn_var"), ArchiveTensor::vector(vec![1.0; c]));
    }
    a
}
