//! Report rendering: sweep tables, accuracy curves, confusion matrix files and
//! the run manifest. Output depends only on the inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bench::SweepResult;
use crate::dataset::{CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::Metrics;

/// Pixels per matrix cell in the heatmap.
const HEATMAP_CELL: usize = 16;

pub fn class_names(k: usize) -> Vec<String> {
    if k == NUM_CLASSES {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("class{i}")).collect()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(sweep: &SweepResult) -> String {
    let k = sweep.cells.iter().map(|c| c.summary.accuracies.len()).max().unwrap_or(0);
    let mut out = String::from("size");
    for i in 1..=k {
        write!(out, ",accuracy_{i}").unwrap();
    }
    for i in 1..=k {
        write!(out, ",speed_{i}").unwrap();
    }
    out.push_str(",mean_accuracy,mean_speed,disparity,forward_ips,end_to_end_ips,batch,threads,seeds,config_hash\n");
    for c in &sweep.cells {
        let s = &c.summary;
        write!(out, "{}", c.size).unwrap();
        for i in 0..k {
            match s.accuracies.get(i) {
                Some(a) => write!(out, ",{:.4}", 100.0 * a).unwrap(),
                None => out.push(','),
            }
        }
        for i in 0..k {
            match s.throughputs.get(i) {
                Some(t) => write!(out, ",{t:.2}").unwrap(),
                None => out.push(','),
            }
        }
        let seeds: Vec<String> = c.seeds.iter().map(u64::to_string).collect();
        writeln!(
            out,
            ",{:.4},{:.2},{:.4},{:.2},{:.2},{},{},{},{}",
            100.0 * s.mean_accuracy,
            s.mean_throughput,
            100.0 * s.disparity,
            c.throughput.forward_only,
            c.throughput.end_to_end,
            c.throughput.batch,
            c.throughput.threads,
            seeds.join(" "),
            c.config_hash
        )
        .unwrap();
    }
    out
}

pub fn sweep_markdown(sweep: &SweepResult) -> String {
    let mut out = String::new();
    writeln!(out, "Hardware: {}  ", sweep.hardware).unwrap();
    writeln!(out, "Threads: {}\n", sweep.threads).unwrap();
    out.push_str("| Image size | Accuracies (%) | Speeds (img/s) | Mean accuracy (%) | Mean speed (img/s) | Disparity (%) | Forward (img/s) | End-to-end (img/s) |\n");
    out.push_str("|---:|---|---|---:|---:|---:|---:|---:|\n");
    for c in &sweep.cells {
        let s = &c.summary;
        let accs: Vec<String> = s.accuracies.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
        let speeds: Vec<String> = s.throughputs.iter().map(|t| format!("{t:.1}")).collect();
        writeln!(
            out,
            "| {} | {} | {} | {:.2} | {:.1} | {:.2} | {:.1} | {:.1} |",
            c.size,
            accs.join(" / "),
            speeds.join(" / "),
            100.0 * s.mean_accuracy,
            s.mean_throughput,
            100.0 * s.disparity,
            c.throughput.forward_only,
            c.throughput.end_to_end
        )
        .unwrap();
    }
    out
}

/// `epoch,lr,S<size>...` with the run-averaged validation accuracy per size.
pub fn curves_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("epoch,lr");
    for c in &sweep.cells {
        write!(out, ",S{}", c.size).unwrap();
    }
    out.push('\n');
    let curves: Vec<Vec<f64>> = sweep.cells.iter().map(|c| c.mean_curve()).collect();
    let epochs = curves.iter().map(Vec::len).min().unwrap_or(0);
    let lrs: Vec<f64> = sweep
        .cells
        .first()
        .and_then(|c| c.runs.first())
        .map(|r| r.curve.iter().map(|e| e.lr).collect())
        .unwrap_or_default();
    for e in 0..epochs {
        write!(out, "{e},{}", lrs.get(e).map_or(String::new(), |l| format!("{l:e}"))).unwrap();
        for c in &curves {
            write!(out, ",{:.6}", c[e]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn confusion_raw_csv(m: &Metrics, names: &[String]) -> String {
    let mut out = String::from("true\\predicted");
    for n in names {
        write!(out, ",{}", csv_field(n)).unwrap();
    }
    out.push('\n');
    for (name, row) in names.iter().zip(m.confusion()) {
        out.push_str(&csv_field(name));
        for c in row {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Row-normalized matrix; rows without samples are written as `NA`.
pub fn confusion_norm_csv(m: &Metrics, names: &[String]) -> String {
    let mut out = String::from("true\\predicted");
    for n in names {
        write!(out, ",{}", csv_field(n)).unwrap();
    }
    out.push('\n');
    for (name, row) in names.iter().zip(m.normalized()) {
        out.push_str(&csv_field(name));
        match row {
            Some(r) => r.iter().for_each(|v| write!(out, ",{v:.6}").unwrap()),
            None => names.iter().for_each(|_| out.push_str(",NA")),
        }
        out.push('\n');
    }
    out
}

/// Table of support, dataset share and per-class accuracy, aligned for reading.
pub fn per_class_csv(m: &Metrics, names: &[String]) -> String {
    let total = m.total();
    let width = names.iter().map(String::len).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$},support,share_pct,accuracy_pct\n", "class");
    for (i, (name, acc)) in names.iter().zip(m.per_class_accuracy()).enumerate() {
        let support = m.row_total(i);
        let share = if total > 0 { 100.0 * support as f64 / total as f64 } else { 0.0 };
        let acc = acc.map_or("NA".to_string(), |a| format!("{:.2}", 100.0 * a));
        writeln!(out, "{:<width$},{support:>7},{share:>9.2},{acc:>12}", csv_field(name)).unwrap();
    }
    out
}

/// Binary PGM of the normalized matrix: 255 is a full row, empty rows are black.
pub fn confusion_pgm(m: &Metrics) -> Vec<u8> {
    let k = m.num_classes();
    let side = k * HEATMAP_CELL;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    let norm = m.normalized();
    for y in 0..side {
        let row = &norm[y / HEATMAP_CELL];
        for x in 0..side {
            let v = row.as_ref().map_or(0.0, |r| r[x / HEATMAP_CELL]);
            out.push((255.0 * v).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn manifest_json(manifest: &serde_json::Map<String, serde_json::Value>) -> Result<String> {
    Ok(serde_json::to_string_pretty(manifest)? + "\n")
}

fn write(dir: &Path, name: &str, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes the confusion matrix files for one set of metrics.
pub fn write_confusion(dir: &Path, m: &Metrics) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = class_names(m.num_classes());
    let mut written = Vec::new();
    write(dir, "confusion_raw.csv", confusion_raw_csv(m, &names).as_bytes(), &mut written)?;
    write(dir, "confusion_norm.csv", confusion_norm_csv(m, &names).as_bytes(), &mut written)?;
    write(dir, "confusion.pgm", &confusion_pgm(m), &mut written)?;
    write(dir, "per_class.csv", per_class_csv(m, &names).as_bytes(), &mut written)?;
    Ok(written)
}

pub fn write_manifest(dir: &Path, manifest: &serde_json::Map<String, serde_json::Value>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    write(dir, "manifest.json", manifest_json(manifest)?.as_bytes(), &mut written)?;
    Ok(written.remove(0))
}

/// Renders every report file into `dir`. The confusion files describe the size
/// with the highest mean accuracy (the largest such size on ties).
pub fn render_report(sweep: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    sweep.validate()?;
    let best = sweep
        .cells
        .iter()
        .rev()
        .max_by(|a, b| a.summary.mean_accuracy.total_cmp(&b.summary.mean_accuracy))
        .ok_or_else(|| Error::InvalidArgument("sweep has no cells".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    write(dir, "sweep.csv", sweep_csv(sweep).as_bytes(), &mut written)?;
    write(dir, "sweep.md", sweep_markdown(sweep).as_bytes(), &mut written)?;
    write(dir, "curves.csv", curves_csv(sweep).as_bytes(), &mut written)?;
    written.extend(write_confusion(dir, &best.metrics)?);
    let mut manifest = sweep.manifest.clone();
    manifest.insert("hardware".into(), sweep.hardware.clone().into());
    manifest.insert("threads".into(), sweep.threads.into());
    manifest.insert("config_hash".into(), sweep.config_hash.clone().into());
    manifest.insert("confusion_size".into(), best.size.into());
    for c in &sweep.cells {
        let seeds: Vec<String> = c.seeds.iter().map(u64::to_string).collect();
        manifest.insert(format!("seeds_S{}", c.size), seeds.join(" ").into());
    }
    written.push(write_manifest(dir, &manifest)?);
    Ok(written)
}
