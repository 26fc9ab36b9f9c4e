//! Acceptance suite. Each `criterion_*` test is one pass/fail line.
//!
//! Criteria that need the real Food-11 download and a pretrained archive are
//! ignored by default. Run them with
//!
//! ```text
//! MNV2_FOOD11_ROOT=/data/food11 MNV2_PRETRAINED=/data/mobilenet_v2.mnv2 \
//!     cargo test --release --test acceptance -- --ignored --nocapture
//! ```

mod common;

use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mnv2::bench::{synthetic_image, throughput, ThroughputConfig};
use mnv2::dataset::{balanced_sample, scan, stats, stratified_subset, ClassLabel, Split, SplitIndex, NUM_CLASSES};
use mnv2::loader::load_model;
use mnv2::metrics::Metrics;
use mnv2::model::{Classifier, FEATURE_DIM};
use mnv2::ops::reference::{conv2d_reference, global_avg_pool_reference, linear_reference};
use mnv2::ops::{conv2d, global_avg_pool, linear};
use mnv2::preprocess::PreprocConfig;
use mnv2::train::{evaluate_features, evaluate_heads, full_run, head_gradient, lr_at, sgd_step, RunSpec, RunSummary, TrainConfig};
use mnv2::weights::WeightArchive;
use mnv2::{Matrix, MobileNetV2, Tensor};

/// Published per-class counts: training, validation, evaluation.
const TABLE_COUNTS: [(&str, [usize; 3]); NUM_CLASSES] = [
    ("Bread", [994, 362, 368]),
    ("Dairy Product", [429, 144, 148]),
    ("Dessert", [1500, 500, 500]),
    ("Egg", [986, 327, 335]),
    ("Fried Food", [848, 326, 287]),
    ("Meat", [1325, 449, 432]),
    ("Noodles-Pasta", [440, 147, 147]),
    ("Rice", [280, 96, 96]),
    ("Seafood", [855, 347, 303]),
    ("Soup", [1500, 500, 500]),
    ("Vegetable-Fruit", [709, 232, 231]),
];

/// Criteria run one at a time so the throughput measurement has the machine to itself.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, pass: bool, detail: impl AsRef<str>) {
    println!("ACCEPTANCE {name}: {} ({})", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(pass, "{name}: {}", detail.as_ref());
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs() as f64).fold(0.0, f64::max);
    diff / scale.max(1e-30)
}

#[test]
fn criterion_parameter_count() {
    let _serial = serial();
    let p11 = MobileNetV2::build(11).unwrap().parameter_count();
    let p1000 = MobileNetV2::build(1000).unwrap().parameter_count();
    report(
        "parameter_count",
        p11 == 2_237_963 && p1000 == 3_504_872,
        format!("11 classes: {p11}, 1000 classes: {p1000}"),
    );
}

#[test]
fn criterion_kernel_oracle_suite() {
    let _serial = serial();
    let model = MobileNetV2::build(11).unwrap();
    let layers: Vec<_> = model.conv_layers().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0f64;
    let mut shapes = 0;
    for round in 0..4 {
        for layer in &layers {
            let [cout, cin_g, k, _] = layer.weight.shape();
            let p = layer.params;
            let cin = cin_g * p.groups;
            let n = 1 + round % 2;
            let size = rng.gen_range(3..=20);
            let x = Tensor::from_vec([n, cin, size, size], uniform(&mut rng, n * cin * size * size, 1.0)).unwrap();
            let fan_in = (cin_g * k * k) as f32;
            let w = Tensor::from_vec([cout, cin_g, k, k], uniform(&mut rng, cout * cin_g * k * k, 1.0 / fan_in.sqrt()))
                .unwrap();
            let b = uniform(&mut rng, cout, 0.5);
            let fast = conv2d(&x, &w, Some(&b), p).unwrap();
            let slow = conv2d_reference(&x, &w, Some(&b), p).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            worst = worst.max(rel_err(fast.data(), slow.data()));
            shapes += 1;
        }
    }
    for _ in 0..25 {
        let n = rng.gen_range(1..=16);
        let k = rng.gen_range(2..=1000);
        let x = Matrix::from_vec(n, FEATURE_DIM, uniform(&mut rng, n * FEATURE_DIM, 1.0)).unwrap();
        let w = Matrix::from_vec(k, FEATURE_DIM, uniform(&mut rng, k * FEATURE_DIM, 0.03)).unwrap();
        let b = uniform(&mut rng, k, 0.1);
        let fast = linear(&x, &w, &b).unwrap();
        let slow = linear_reference(&x, &w, &b).unwrap();
        worst = worst.max(rel_err(fast.data(), slow.data()));
        shapes += 1;
    }
    for _ in 0..25 {
        let layer = layers[rng.gen_range(0..layers.len())];
        let c = layer.out_channels();
        let (h, w) = (rng.gen_range(1..=14), rng.gen_range(1..=14));
        let x = Tensor::from_vec([2, c, h, w], uniform(&mut rng, 2 * c * h * w, 3.0)).unwrap();
        worst = worst.max(rel_err(global_avg_pool(&x).data(), global_avg_pool_reference(&x).data()));
        shapes += 1;
    }
    report(
        "kernel_oracle_suite",
        shapes >= 200 && worst <= 1e-5,
        format!("{shapes} shapes, worst relative error {worst:.2e}"),
    );
}

/// Mean cross-entropy in double precision, written independently of the crate.
fn xent_f64(w: &[f64], b: &[f64], x: &Matrix, labels: &[usize]) -> f64 {
    let k = b.len();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = x.row(i);
        let logits: Vec<f64> = (0..k)
            .map(|c| b[c] + row.iter().zip(&w[c * FEATURE_DIM..]).map(|(&xv, &wv)| xv as f64 * wv).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[label];
    }
    total / labels.len() as f64
}

#[test]
fn criterion_gradient_check() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0f64;
    for _ in 0..50 {
        let k = rng.gen_range(2..=12);
        let n = rng.gen_range(1..=8);
        let mut head = Classifier::init_uniform(k, rng.gen());
        head.bias = uniform(&mut rng, k, 0.5);
        let x = Matrix::from_vec(n, FEATURE_DIM, (0..n * FEATURE_DIM).map(|_| rng.gen_range(0.0..2.0)).collect())
            .unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let (_, grad) = head_gradient(&head, &x, &labels).unwrap();

        let w: Vec<f64> = head.weight.data().iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = head.bias.iter().map(|&v| v as f64).collect();
        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..24 {
            let idx = rng.gen_range(0..w.len());
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[idx] += h;
            wm[idx] -= h;
            numeric.push((xent_f64(&wp, &b, &x, &labels) - xent_f64(&wm, &b, &x, &labels)) / (2.0 * h));
            analytic.push(grad.weight.data()[idx] as f64);
        }
        for c in 0..k {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[c] += h;
            bm[c] -= h;
            numeric.push((xent_f64(&w, &bp, &x, &labels) - xent_f64(&w, &bm, &x, &labels)) / (2.0 * h));
            analytic.push(grad.bias[c] as f64);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / norm(&analytic).max(norm(&numeric)).max(1e-30));
    }
    report(
        "gradient_check",
        worst <= 1e-4,
        format!("50 instances, worst relative error {worst:.2e}"),
    );
}

#[test]
fn criterion_optimizer_arithmetic() {
    let _serial = serial();
    let base = TrainConfig {
        weight_decay: 0.0,
        momentum: 0.9,
        ..TrainConfig::default()
    };
    let step = |nesterov: bool| {
        let cfg = TrainConfig { nesterov, ..base.clone() };
        let (mut p, mut v) = ([1f32], [0f32]);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, &cfg).unwrap();
        p[0]
    };
    let (nesterov, plain) = (step(true), step(false));
    let cfg = TrainConfig::default();
    let epochs = [0, 9, 10, 19, 20, 29];
    let lrs: Vec<f64> = epochs.iter().map(|&e| lr_at(e, &cfg)).collect();
    let pass = nesterov == 0.81 && plain == 0.9 && lrs == [1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5];
    report(
        "optimizer_arithmetic",
        pass,
        format!("nesterov {nesterov}, plain {plain}, lr at {epochs:?} = {lrs:?}"),
    );
}

#[test]
fn criterion_protocol_arithmetic() {
    let _serial = serial();
    let rows: [(usize, [f64; 5], f64, f64); 4] = [
        (32, [59.81, 61.06, 59.71, 60.11, 60.18], 60.17, 1.35),
        (64, [77.86, 77.69, 77.96, 76.89, 76.91], 77.46, 1.07),
        (128, [87.78, 88.41, 88.12, 88.68, 88.02], 88.20, 0.90),
        (256, [92.98, 92.81, 93.05, 92.71, 93.29], 92.97, 0.58),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (s, accs, mean, disparity) in rows {
        let sum = RunSummary::from_runs(accs.to_vec(), vec![]).unwrap();
        pass &= (sum.mean_accuracy - mean).abs() <= 0.005 && (sum.disparity - disparity).abs() <= 0.005;
        detail.push(format!("S={s}: {:.3}/{:.3}", sum.mean_accuracy, sum.disparity));
    }
    report("protocol_arithmetic", pass, detail.join(", "));
}

#[test]
fn criterion_throughput_ordering() {
    let _serial = serial();
    let model = MobileNetV2::random(11, 3).unwrap();
    let source = synthetic_image(512, 384, 1);
    let cfg = ThroughputConfig {
        warmup: 2,
        iters: 9,
        ..ThroughputConfig::default()
    };
    let sizes = [32, 64, 128, 256];
    let mut fwd = Vec::new();
    let mut e2e = Vec::new();
    for s in sizes {
        let t = throughput(&model, &source, &PreprocConfig::imagenet(s), &cfg).unwrap();
        fwd.push(t.forward_only);
        e2e.push(t.end_to_end);
    }
    let decreasing = |r: &[f64]| r.windows(2).all(|w| w[0] > w[1]);
    let ordered = decreasing(&fwd) && decreasing(&e2e);
    let drop_small = fwd[1] - fwd[2];
    let drop_large = fwd[2] - fwd[3];
    let grows = drop_large > drop_small;
    let detail = format!(
        "batch {}, forward img/s {:.1?}, end-to-end img/s {:.1?}; strictly decreasing: {ordered}; \
         drop 64->128 {drop_small:.1}, drop 128->256 {drop_large:.1}, larger drop at high resolution: {grows}",
        cfg.batch, fwd, e2e
    );
    report("throughput_ordering", ordered && grows, detail);
}

fn synthetic_balanced_split(root: &std::path::Path, per_class: usize) -> SplitIndex {
    let mut classes = Vec::new();
    for c in 0..NUM_CLASSES {
        let dir = root.join(format!("{c}"));
        std::fs::create_dir_all(&dir).unwrap();
        let mut paths = Vec::new();
        for i in 0..per_class {
            let p = dir.join(format!("{i:03}.png"));
            let img = synthetic_image(48, 48, (c * 1000 + i) as u64);
            image::RgbImage::from_raw(48, 48, img.pixels().to_vec()).unwrap().save(&p).unwrap();
            paths.push(p);
        }
        classes.push(paths);
    }
    SplitIndex::from_classes(classes).unwrap()
}

/// Mean accuracy of several freshly initialized heads on one balanced split.
fn untrained_accuracy(model: &MobileNetV2, split: &SplitIndex, size: usize, heads: u64) -> f64 {
    let heads: Vec<Classifier> = (0..heads).map(|s| Classifier::init_uniform(NUM_CLASSES, 1000 + s)).collect();
    let refs: Vec<&Classifier> = heads.iter().collect();
    let out = evaluate_heads(model, &refs, split, &PreprocConfig::imagenet(size), 128).unwrap();
    out.metrics.iter().map(Metrics::accuracy).sum::<f64>() / out.metrics.len() as f64
}

#[test]
fn criterion_epoch0_sanity() {
    let _serial = serial();
    let archive = WeightArchive::read_file(common::fixture("parity_model.mnv2")).unwrap();
    let model = load_model(&archive, NUM_CLASSES, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let split = synthetic_balanced_split(dir.path(), 30);
    let acc = untrained_accuracy(&model, &split, 32, 10);
    report(
        "epoch0_sanity",
        (acc - 0.09).abs() <= 0.03,
        format!("mean of 10 untrained heads on 11x30 synthetic images at S=32: {acc:.4}"),
    );
}

#[test]
fn criterion_confusion_identities() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_row = 0f64;
    let mut exact = true;
    for trial in 0..200 {
        let k = rng.gen_range(2..=11);
        let n = rng.gen_range(1..=500);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let predicted: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.gen_bool(0.6) { t } else { rng.gen_range(0..k) })
            .collect();
        let m = if trial % 2 == 0 {
            Metrics::from_predictions(k, &truth, &predicted).unwrap()
        } else {
            let head = Classifier::init_uniform(k, trial);
            let x = Matrix::from_vec(n, FEATURE_DIM, uniform(&mut rng, n * FEATURE_DIM, 1.0)).unwrap();
            evaluate_features(&head, &x, &truth, 64).unwrap()
        };
        for row in m.normalized().into_iter().flatten() {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let trace: u64 = (0..k).map(|i| m.confusion()[i][i]).sum();
        let weighted: u64 = m
            .per_class_accuracy()
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|a| (a * m.row_total(i) as f64).round() as u64))
            .sum();
        exact &= m.accuracy() == trace as f64 / n as f64 && weighted == trace && m.total() == n as u64;
    }
    report(
        "confusion_identities",
        worst_row <= 1e-9 && exact,
        format!("200 matrices, worst row-sum error {worst_row:.1e}, accuracy identity exact: {exact}"),
    );
}

#[test]
fn criterion_dataset_checks_on_synthetic_tree() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut png = Vec::new();
    image::RgbImage::from_pixel(2, 2, image::Rgb([90, 120, 30]))
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageOutputFormat::Png)
        .unwrap();
    for (s, split) in ["training", "validation", "evaluation"].iter().enumerate() {
        for (c, (_, counts)) in TABLE_COUNTS.iter().enumerate() {
            let d = root.join(split).join(common::CLASS_DIRS[c]);
            std::fs::create_dir_all(&d).unwrap();
            for i in 0..counts[s] {
                std::fs::write(d.join(format!("{c}_{i}.png")), &png).unwrap();
            }
        }
    }
    let (pass, detail) = dataset_checks(scan(root).unwrap().index);
    report("dataset_checks_synthetic_tree", pass, detail);
}

fn dataset_checks(index: mnv2::dataset::DatasetIndex) -> (bool, String) {
    let st = stats(&index);
    let training_ok = TABLE_COUNTS
        .iter()
        .all(|(name, counts)| st.count(Split::Training, ClassLabel::from_name(name).unwrap()) == counts[0]);
    let note = st.validation_total_note();
    let flagged = note.contains("3439") && note.contains("3430");
    let rice = ClassLabel::from_name("Rice").unwrap();
    let rice_shares: Vec<f64> = Split::ALL.iter().map(|&s| st.pct_of_split(s, rice)).collect();
    let pass = st.split_total(Split::Training) == 9866
        && st.split_total(Split::Evaluation) == 3347
        && st.grand_total() == 16643
        && training_ok
        && flagged
        && index.check_no_leakage().is_ok();
    let detail = format!(
        "training {}, validation {}, evaluation {}, total {}, per-class training counts match: {training_ok}, Rice shares {:.1?}; {note}",
        st.split_total(Split::Training),
        st.split_total(Split::Validation),
        st.split_total(Split::Evaluation),
        st.grand_total(),
        rice_shares
    );
    (pass, detail)
}

fn env_path(var: &str) -> PathBuf {
    match std::env::var_os(var) {
        Some(p) => PathBuf::from(p),
        None => panic!("BLOCKED: set {var} (Food-11 root / pretrained .mnv2 archive) to run this criterion"),
    }
}

#[test]
#[ignore = "requires the Food-11 dataset (MNV2_FOOD11_ROOT)"]
fn criterion_dataset_checks() {
    let _serial = serial();
    let report_ = scan(env_path("MNV2_FOOD11_ROOT")).unwrap();
    println!("skipped files: {}", report_.skipped.len());
    let (pass, detail) = dataset_checks(report_.index);
    report("dataset_checks", pass, detail);
}

#[test]
#[ignore = "requires Food-11 (MNV2_FOOD11_ROOT) and a pretrained archive (MNV2_PRETRAINED)"]
fn criterion_epoch0_sanity_real_data() {
    let _serial = serial();
    let index = scan(env_path("MNV2_FOOD11_ROOT")).unwrap().index;
    let archive = WeightArchive::read_file(env_path("MNV2_PRETRAINED")).unwrap();
    let model = load_model(&archive, NUM_CLASSES, 0).unwrap();
    let mut detail = Vec::new();
    let mut pass = true;
    for split in [Split::Validation, Split::Evaluation] {
        let sample = balanced_sample(index.split(split), 96, 0);
        let acc = untrained_accuracy(&model, &sample, 224, 5);
        pass &= (acc - 0.09).abs() <= 0.03;
        detail.push(format!("{}: {acc:.4}", split.name()));
    }
    report("epoch0_sanity_real_data", pass, detail.join(", "));
}

#[test]
#[ignore = "requires Food-11 (MNV2_FOOD11_ROOT) and a pretrained archive (MNV2_PRETRAINED); tens of minutes"]
fn criterion_trend_reproduction() {
    let _serial = serial();
    let full = scan(env_path("MNV2_FOOD11_ROOT")).unwrap().index;
    let index = stratified_subset(&full, 0.1, 0).unwrap();
    let archive = WeightArchive::read_file(env_path("MNV2_PRETRAINED")).unwrap();
    let model = load_model(&archive, NUM_CLASSES, 0).unwrap();
    let cache = std::env::temp_dir().join("mnv2-feature-cache");
    let mut means = Vec::new();
    for size in [32, 64, 128, 256] {
        let spec = RunSpec {
            model: &model,
            index: &index,
            train: TrainConfig {
                augment_variants: 3,
                ..TrainConfig::default()
            },
            preproc: PreprocConfig::imagenet(size),
            augment: Default::default(),
            cache_dir: Some(cache.clone()),
        };
        let (summary, _) = mnv2::train::repeated_runs(3, 0, |seed| full_run(&spec, seed)).unwrap();
        println!("S={size}: accuracies {:?}, mean {:.4}", summary.accuracies, summary.mean_accuracy);
        means.push(summary.mean_accuracy);
    }
    let increasing = means.windows(2).all(|w| w[0] < w[1]);
    let taper = means[2] - means[1] > means[3] - means[2];
    report(
        "trend_reproduction",
        increasing && taper,
        format!("mean accuracies at 32/64/128/256: {means:.4?}"),
    );
}
