use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use mnv2::bench::{config_hash, hardware_descriptor, resolution_sweep, synthetic_image, throughput, SweepResult};
use mnv2::config::{parse_override, RunConfig};
use mnv2::dataset::{scan, stats, stratified_subset, DatasetIndex, Split, NUM_CLASSES};
use mnv2::error::{Error, Result};
use mnv2::loader::{classifier_to_archive, load_model, validate_names, DEFAULT_BN_EPS};
use mnv2::ops::softmax;
use mnv2::preprocess::{main_transform, ImageRgb8, PreprocConfig};
use mnv2::report::{render_report, write_confusion, write_manifest};
use mnv2::train::{evaluate_heads, full_run, train_head, RunSpec};
use mnv2::weights::WeightArchive;
use mnv2::MobileNetV2;

/// MobileNetV2 inference and Food-11 benchmark harness.
#[derive(Parser)]
#[command(name = "mnv2", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-split, per-class image counts of a Food-11 tree (CSV on stdout).
    Stats {
        root: PathBuf,
        /// Also write stats.csv into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a .mnv2 archive against the network's tensor table.
    ValidateWeights { file: PathBuf },
    /// Print the top classes for one image.
    Classify {
        image: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        top: usize,
    },
    /// Train the classifier head on frozen features.
    TrainHead(RunArgs),
    /// Accuracy and confusion matrix on the evaluation split.
    Evaluate(RunArgs),
    /// Forward-only and end-to-end throughput for each configured size.
    Bench(RunArgs),
    /// Repeated train/evaluate runs and throughput for each size, plus the report.
    Sweep(RunArgs),
    /// Re-render report files from a saved sweep.json.
    Report {
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Food-11 root directory.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Weight archive.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stratified subset fraction, in (0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Any other config key, as KEY=VALUE (VALUE parsed as JSON when possible).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Map<String, Value>> {
        let mut m = Map::new();
        let path = |p: &PathBuf| Value::from(p.to_string_lossy().into_owned());
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("dataset_root", self.root.as_ref().map(path));
        put("weights", self.model.as_ref().map(path));
        put("out", self.out.as_ref().map(path));
        put("cache_dir", self.cache_dir.as_ref().map(path));
        put("fraction", self.fraction.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("size", self.size.map(Value::from));
        put("sizes", self.sizes.clone().map(Value::from));
        put("runs", self.runs.map(Value::from));
        put("epochs", self.epochs.map(Value::from));
        put("threads", self.threads.map(Value::from));
        for s in &self.set {
            let (k, v) = parse_override(s)?;
            m.insert(k, v);
        }
        Ok(m)
    }
}

/// Resolved config plus the thread pool it asks for; writes the manifest.
fn start(args: &RunArgs, command: &str) -> Result<RunConfig> {
    let cfg = RunConfig::resolve(args.config.as_deref(), args.overrides()?)?;
    if let Some(n) = cfg.resolved_threads()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut manifest = cfg.to_map()?;
    manifest.insert("command".into(), command.into());
    manifest.insert("hardware".into(), hardware_descriptor().into());
    manifest.insert("threads".into(), rayon::current_num_threads().into());
    manifest.insert("config_hash".into(), config_hash(&serde_json::to_string(&cfg)?).into());
    write_manifest(&cfg.out, &manifest)?;
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("missing {what}")))
}

fn load_index(cfg: &RunConfig) -> Result<DatasetIndex> {
    let report = scan(require(&cfg.dataset_root, "dataset root (--root)")?)?;
    for (path, why) in &report.skipped {
        log::warn!("skipped {}: {why}", path.display());
    }
    report.index.check_no_leakage()?;
    if cfg.fraction < 1.0 {
        stratified_subset(&report.index, cfg.fraction, cfg.train.seed)
    } else {
        Ok(report.index)
    }
}

fn load_archive(path: &Path) -> Result<(WeightArchive, MobileNetV2)> {
    let archive = WeightArchive::read_file(path)?;
    let model = load_model(&archive, NUM_CLASSES, 0)?;
    if archive.get("classifier.w").is_none() {
        log::warn!("{} has no classifier; using a freshly initialized head", path.display());
    }
    Ok((archive, model))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn cmd_stats(root: &Path, out: Option<&Path>) -> Result<()> {
    let report = scan(root)?;
    report.index.check_no_leakage()?;
    let s = stats(&report.index);
    let csv = s.to_csv();
    print!("{csv}");
    for split in Split::ALL {
        println!("{} total: {}", split.name(), s.split_total(split));
    }
    println!("grand total: {}", s.grand_total());
    println!("skipped files: {}", report.skipped.len());
    println!("{}", s.validation_total_note());
    for (path, why) in &report.skipped {
        eprintln!("skipped {}: {why}", path.display());
    }
    if let Some(dir) = out {
        write_text(dir, "stats.csv", &csv)?;
    }
    Ok(())
}

fn cmd_validate(file: &Path) -> Result<()> {
    let archive = WeightArchive::read_file(file)?;
    validate_names(&archive)?;
    let model = load_model(&archive, NUM_CLASSES, 0)?;
    let eps = archive.get("bn_eps").map_or(DEFAULT_BN_EPS, |t| t.data[0]);
    let head = if archive.get("classifier.w").is_some() { "present" } else { "absent" };
    println!(
        "ok: {} tensors, {} parameters at {} classes, bn_eps {eps:e}, classifier {head}",
        archive.len(),
        model.parameter_count(),
        NUM_CLASSES
    );
    Ok(())
}

fn cmd_classify(image: &Path, model_path: &Path, size: usize, top: usize) -> Result<()> {
    let (_, model) = load_archive(model_path)?;
    let preproc = PreprocConfig::imagenet(size);
    preproc.validate()?;
    let input = main_transform(&ImageRgb8::open(image)?, &preproc)?;
    let probs = softmax(&model.forward(&input)?);
    let mut ranked: Vec<(usize, f32)> = probs.row(0).iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let names = mnv2::report::class_names(model.num_classes());
    for (i, p) in ranked.into_iter().take(top) {
        println!("{}\t{p:.4}", names[i]);
    }
    Ok(())
}

fn cmd_train_head(args: &RunArgs) -> Result<()> {
    let cfg = start(args, "train-head")?;
    let index = load_index(&cfg)?;
    let weights = require(&cfg.weights, "weights archive (--model)")?;
    let (mut archive, model) = load_archive(weights)?;
    let spec = RunSpec {
        model: &model,
        index: &index,
        train: cfg.train.clone(),
        preproc: cfg.preproc(),
        augment: cfg.augment.clone(),
        cache_dir: cfg.cache_dir.clone(),
    };
    let result = train_head(&spec, cfg.train.seed)?;
    let mut csv = String::from("epoch,lr,train_loss,val_accuracy\n");
    for r in &result.curve {
        let loss = r.train_loss.map_or(String::new(), |l| format!("{l:.6}"));
        csv.push_str(&format!("{},{:e},{loss},{:.6}\n", r.epoch, r.lr, r.val_accuracy));
    }
    write_text(&cfg.out, "curves.csv", &csv)?;
    for (name, t) in classifier_to_archive(&result.head).into_map() {
        archive.insert(name, t);
    }
    archive.write_file(cfg.out.join("model.mnv2"))?;
    let last = result.curve.last().expect("epoch 0 is always recorded");
    println!("validation accuracy after {} epochs: {:.4}", last.epoch, last.val_accuracy);
    Ok(())
}

fn cmd_evaluate(args: &RunArgs) -> Result<()> {
    let cfg = start(args, "evaluate")?;
    let index = load_index(&cfg)?;
    let (_, model) = load_archive(require(&cfg.weights, "weights archive (--model)")?)?;
    let mut out = evaluate_heads(
        &model,
        &[&model.classifier],
        &index.evaluation,
        &cfg.preproc(),
        cfg.train.batch_eval,
    )?;
    let m = out.metrics.remove(0);
    write_text(
        &cfg.out,
        "metrics.csv",
        &format!(
            "size,accuracy,correct,total,images_per_second\n{},{:.6},{},{},{:.2}\n",
            cfg.size,
            m.accuracy(),
            m.correct(),
            m.total(),
            out.images_per_second
        ),
    )?;
    write_confusion(&cfg.out, &m)?;
    println!("accuracy: {:.4} ({}/{})", m.accuracy(), m.correct(), m.total());
    Ok(())
}

fn bench_model(cfg: &RunConfig) -> Result<MobileNetV2> {
    match &cfg.weights {
        Some(p) => Ok(load_archive(p)?.1),
        None => {
            log::warn!("no weights given; timing a randomly initialized network");
            MobileNetV2::random(NUM_CLASSES, cfg.train.seed)
        }
    }
}

fn cmd_bench(args: &RunArgs) -> Result<()> {
    let cfg = start(args, "bench")?;
    let model = bench_model(&cfg)?;
    let source = synthetic_image(512, 384, cfg.train.seed);
    let mut csv = String::from("size,batch,threads,forward_ips,end_to_end_ips\n");
    println!("hardware: {}", hardware_descriptor());
    for &size in &cfg.sizes {
        let t = throughput(&model, &source, &cfg.preproc_at(size), &cfg.throughput())?;
        let line = format!("{},{},{},{:.2},{:.2}\n", t.size, t.batch, t.threads, t.forward_only, t.end_to_end);
        print!("{line}");
        csv.push_str(&line);
    }
    write_text(&cfg.out, "bench.csv", &csv)
}

fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let cfg = start(args, "sweep")?;
    let index = load_index(&cfg)?;
    let (_, model) = load_archive(require(&cfg.weights, "weights archive (--model)")?)?;
    let source = synthetic_image(512, 384, cfg.train.seed);
    let hash = config_hash(&serde_json::to_string(&cfg)?);
    let cells = resolution_sweep(
        &cfg.sizes,
        cfg.runs,
        cfg.train.seed,
        &hash,
        |size, seed| {
            log::info!("size {size}, run seed {seed}");
            let spec = RunSpec {
                model: &model,
                index: &index,
                train: cfg.train.clone(),
                preproc: cfg.preproc_at(size),
                augment: cfg.augment.clone(),
                cache_dir: cfg.cache_dir.clone(),
            };
            full_run(&spec, seed)
        },
        |size| throughput(&model, &source, &cfg.preproc_at(size), &cfg.throughput()),
    )?;
    let sweep = SweepResult {
        cells,
        hardware: hardware_descriptor(),
        threads: rayon::current_num_threads(),
        config_hash: hash,
        manifest: cfg.to_map()?,
    };
    write_text(&cfg.out, "sweep.json", &serde_json::to_string_pretty(&sweep)?)?;
    render_report(&sweep, &cfg.out)?;
    print!("{}", mnv2::report::sweep_markdown(&sweep));
    Ok(())
}

fn cmd_report(sweep: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(sweep).map_err(|e| Error::io(sweep, e))?;
    let sweep: SweepResult = serde_json::from_str(&text)?;
    for p in render_report(&sweep, out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats { root, out } => cmd_stats(&root, out.as_deref()),
        Command::ValidateWeights { file } => cmd_validate(&file),
        Command::Classify { image, model, size, top } => cmd_classify(&image, &model, size, top),
        Command::TrainHead(a) => cmd_train_head(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Report { sweep, out } => cmd_report(&sweep, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
