//! Food-11 directory index: scanning, per-split statistics and subsetting.
//!
//! Accepted layouts under the root, per split directory:
//!
//! * one sub-directory per class (`Bread/`, `Dairy product/`, `0_Bread/`, `3/` ...),
//! * or flat files named `<class index>_<n>.jpg`, as in the original release.
//!
//! Split and class directory spellings are normalized through
//! `data/food11_aliases.json`: names are lower-cased, a leading numeric prefix is
//! dropped, and only ASCII letters are kept before lookup.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

pub const NUM_CLASSES: usize = 11;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Bread",
    "Dairy Product",
    "Dessert",
    "Egg",
    "Fried Food",
    "Meat",
    "Noodles-Pasta",
    "Rice",
    "Seafood",
    "Soup",
    "Vegetable-Fruit",
];

/// Published split totals: training, validation (text), evaluation.
pub const PUBLISHED_TOTALS: [usize; 3] = [9866, 3439, 3347];
/// Validation total obtained by summing the per-class table rows.
pub const PUBLISHED_VALIDATION_TABLE_SUM: usize = 3430;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassLabel(usize);

impl ClassLabel {
    pub fn new(index: usize) -> Option<Self> {
        (index < NUM_CLASSES).then_some(ClassLabel(index))
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.0]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        CLASS_NAMES.iter().position(|&n| n == name).map(ClassLabel)
    }

    pub fn all() -> impl Iterator<Item = ClassLabel> {
        (0..NUM_CLASSES).map(ClassLabel)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Training,
    Validation,
    Evaluation,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Training, Split::Validation, Split::Evaluation];

    pub fn name(self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::Validation => "validation",
            Split::Evaluation => "evaluation",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Deserialize)]
struct Aliases {
    splits: BTreeMap<String, String>,
    classes: BTreeMap<String, String>,
}

fn aliases() -> &'static Aliases {
    static ALIASES: OnceLock<Aliases> = OnceLock::new();
    ALIASES.get_or_init(|| {
        serde_json::from_str(include_str!("../data/food11_aliases.json")).expect("bundled alias file")
    })
}

/// Lower-case, drop a leading `<digits>` + separator, keep ASCII letters only.
fn normalize(name: &str) -> String {
    let trimmed = name.trim_start_matches(|c: char| c.is_ascii_digit());
    trimmed
        .chars()
        .filter(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Resolves a class directory name. Purely numeric names are class indices.
pub fn class_from_dir_name(name: &str) -> Option<ClassLabel> {
    if let Ok(i) = name.trim().parse::<usize>() {
        return ClassLabel::new(i);
    }
    let canonical = aliases().classes.get(&normalize(name))?;
    ClassLabel::from_name(canonical)
}

/// Resolves a flat file name `<index>_<n>.<ext>`.
fn class_from_file_name(name: &str) -> Option<ClassLabel> {
    let (prefix, _) = name.split_once('_')?;
    ClassLabel::new(prefix.parse().ok()?)
}

fn split_from_dir_name(name: &str) -> Option<Split> {
    let key: String = name.chars().filter(|c| c.is_ascii_alphabetic()).map(|c| c.to_ascii_lowercase()).collect();
    match aliases().splits.get(&key)?.as_str() {
        "training" => Some(Split::Training),
        "validation" => Some(Split::Validation),
        "evaluation" => Some(Split::Evaluation),
        _ => None,
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
}

/// Per-class ordered image paths for one split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    classes: Vec<Vec<PathBuf>>,
}

impl SplitIndex {
    pub fn new() -> Self {
        SplitIndex {
            classes: vec![Vec::new(); NUM_CLASSES],
        }
    }

    pub fn from_classes(classes: Vec<Vec<PathBuf>>) -> Result<Self> {
        if classes.len() != NUM_CLASSES {
            return Err(Error::Dataset(format!("expected {NUM_CLASSES} classes, got {}", classes.len())));
        }
        Ok(SplitIndex { classes })
    }

    pub fn class(&self, label: ClassLabel) -> &[PathBuf] {
        &self.classes[label.index()]
    }

    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for (i, paths) in self.classes.iter().enumerate() {
            c[i] = paths.len();
        }
        c
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All `(path, class index)` pairs, class-major, paths in index order.
    pub fn items(&self) -> Vec<(PathBuf, usize)> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(c, paths)| paths.iter().map(move |p| (p.clone(), c)))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub training: SplitIndex,
    pub validation: SplitIndex,
    pub evaluation: SplitIndex,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> &SplitIndex {
        match split {
            Split::Training => &self.training,
            Split::Validation => &self.validation,
            Split::Evaluation => &self.evaluation,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut SplitIndex {
        match split {
            Split::Training => &mut self.training,
            Split::Validation => &mut self.validation,
            Split::Evaluation => &mut self.evaluation,
        }
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.split(s).len()).sum()
    }

    /// Fails if any path occurs in more than one split.
    pub fn check_no_leakage(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in Split::ALL {
            for (path, _) in self.split(s).items() {
                if !seen.insert(path.clone()) {
                    return Err(Error::Dataset(format!("{} appears in more than one split", path.display())));
                }
            }
        }
        Ok(())
    }
}

/// Result of a directory scan: the index plus files that were skipped.
#[derive(Clone, Debug)]
pub struct ScanReport {
    pub index: DatasetIndex,
    pub skipped: Vec<(PathBuf, String)>,
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.retain(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| !n.starts_with('.'))
    });
    entries.sort();
    Ok(entries)
}

fn file_name(path: &Path) -> &str {
    path.file_name().and_then(|n| n.to_str()).unwrap_or("")
}

/// Walks `root`, expecting a training, validation and evaluation directory.
///
/// Files that are not JPEG/PNG or whose header does not decode are skipped and
/// reported; unknown class directories are errors.
pub fn scan(root: impl AsRef<Path>) -> Result<ScanReport> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut split_dirs: BTreeMap<Split, PathBuf> = BTreeMap::new();
    for entry in read_dir_sorted(root)? {
        if entry.is_dir() {
            if let Some(split) = split_from_dir_name(file_name(&entry)) {
                split_dirs.entry(split).or_insert(entry);
            }
        }
    }
    let mut candidates: Vec<(Split, usize, PathBuf)> = Vec::new();
    let mut skipped = Vec::new();
    for split in Split::ALL {
        let dir = split_dirs
            .get(&split)
            .ok_or_else(|| Error::Dataset(format!("missing {} split under {}", split.name(), root.display())))?;
        for entry in read_dir_sorted(dir)? {
            let name = file_name(&entry);
            if entry.is_dir() {
                let label = class_from_dir_name(name)
                    .ok_or_else(|| Error::Dataset(format!("unknown class directory {}", entry.display())))?;
                for file in read_dir_sorted(&entry)? {
                    if file.is_file() {
                        candidates.push((split, label.index(), file));
                    }
                }
            } else if let Some(label) = class_from_file_name(name) {
                candidates.push((split, label.index(), entry));
            } else {
                skipped.push((entry, "no class prefix".to_string()));
            }
        }
    }
    let checks: Vec<Option<String>> = candidates
        .par_iter()
        .map(|(_, _, path)| {
            if !is_image_file(path) {
                return Some("not a JPEG/PNG file".to_string());
            }
            image::image_dimensions(path).err().map(|e| e.to_string())
        })
        .collect();
    let mut index = DatasetIndex {
        training: SplitIndex::new(),
        validation: SplitIndex::new(),
        evaluation: SplitIndex::new(),
    };
    for ((split, class, path), problem) in candidates.into_iter().zip(checks) {
        match problem {
            Some(reason) => skipped.push((path, reason)),
            None => index.split_mut(split).classes[class].push(path),
        }
    }
    for s in Split::ALL {
        for paths in &mut index.split_mut(s).classes {
            paths.sort();
        }
    }
    Ok(ScanReport { index, skipped })
}

/// Per-split, per-class image counts with the two percentage views of the
/// distribution table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    /// `counts[split][class]`
    pub counts: [[usize; NUM_CLASSES]; 3],
}

impl DatasetStats {
    pub fn count(&self, split: Split, class: ClassLabel) -> usize {
        self.counts[split.index()][class.index()]
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.counts[split.index()].iter().sum()
    }

    pub fn class_total(&self, class: ClassLabel) -> usize {
        self.counts.iter().map(|row| row[class.index()]).sum()
    }

    pub fn grand_total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Share of `class`'s images that fall in `split`, in percent.
    pub fn pct_of_class(&self, split: Split, class: ClassLabel) -> f64 {
        pct(self.count(split, class), self.class_total(class))
    }

    /// Share of `split` made up by `class`, in percent.
    pub fn pct_of_split(&self, split: Split, class: ClassLabel) -> f64 {
        pct(self.count(split, class), self.split_total(split))
    }

    /// Compares the validation total with both published figures.
    pub fn validation_total_note(&self) -> String {
        let v = self.split_total(Split::Validation);
        let text = PUBLISHED_TOTALS[1];
        let table = PUBLISHED_VALIDATION_TABLE_SUM;
        match (v == text, v == table) {
            (true, _) => format!("validation total {v} matches the published text figure {text} (table rows sum to {table})"),
            (_, true) => format!("validation total {v} matches the published table sum {table}, not the text figure {text}"),
            _ => format!("validation total {v} matches neither published figure ({text} text, {table} table sum)"),
        }
    }

    /// CSV with header `split,class,count,pct_of_class,pct_of_split`, one row per
    /// split and class followed by a `Total` row per split.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,class,count,pct_of_class,pct_of_split\n");
        for split in Split::ALL {
            for class in ClassLabel::all() {
                out.push_str(&format!(
                    "{},{},{},{:.1},{:.1}\n",
                    split.name(),
                    class.name(),
                    self.count(split, class),
                    self.pct_of_class(split, class),
                    self.pct_of_split(split, class)
                ));
            }
            let total = self.split_total(split);
            out.push_str(&format!(
                "{},Total,{},{:.1},{:.1}\n",
                split.name(),
                total,
                pct(total, self.grand_total()),
                if total > 0 { 100.0 } else { 0.0 }
            ));
        }
        out
    }
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

pub fn stats(index: &DatasetIndex) -> DatasetStats {
    DatasetStats {
        counts: [index.training.counts(), index.validation.counts(), index.evaluation.counts()],
    }
}

/// `ceil(fraction * n)`, robust to binary rounding of products like `0.1 * 280`.
pub fn subset_size(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    let k = (raw - raw.abs() * 1e-12).ceil();
    (k.max(0.0) as usize).min(n)
}

fn sample_sorted(paths: &[PathBuf], k: usize, parts: &[u64]) -> Vec<PathBuf> {
    if k >= paths.len() {
        return paths.to_vec();
    }
    let mut picked = sample(&mut stream(parts), paths.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| paths[i].clone()).collect()
}

/// Samples `ceil(fraction * count)` images per class and split, without
/// replacement, deterministically for a given seed. Chosen paths keep their order.
pub fn stratified_subset(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<DatasetIndex> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("subset fraction {fraction} must be in (0, 1]")));
    }
    let mut out = DatasetIndex::default();
    for split in Split::ALL {
        let src = index.split(split);
        let classes = src
            .classes
            .iter()
            .enumerate()
            .map(|(c, paths)| {
                let k = subset_size(paths.len(), fraction);
                sample_sorted(paths, k, &[seed, split.index() as u64, c as u64])
            })
            .collect();
        *out.split_mut(split) = SplitIndex { classes };
    }
    Ok(out)
}

/// Up to `per_class` images from every class of one split.
pub fn balanced_sample(split: &SplitIndex, per_class: usize, seed: u64) -> SplitIndex {
    let classes = split
        .classes
        .iter()
        .enumerate()
        .map(|(c, paths)| sample_sorted(paths, per_class, &[seed, 0xBA1A, c as u64]))
        .collect();
    SplitIndex { classes }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_names_are_bijective() {
        for l in ClassLabel::all() {
            assert_eq!(ClassLabel::from_name(l.name()), Some(l));
        }
        assert_eq!(ClassLabel::new(11), None);
    }

    #[test]
    fn directory_name_variants() {
        assert_eq!(class_from_dir_name("Dairy product").unwrap().name(), "Dairy Product");
        assert_eq!(class_from_dir_name("1_Dairy_Product").unwrap().index(), 1);
        assert_eq!(class_from_dir_name("Vegetable-Fruit").unwrap().index(), 10);
        assert_eq!(class_from_dir_name("Noodles-Pasta").unwrap().index(), 6);
        assert_eq!(class_from_dir_name("9").unwrap().name(), "Soup");
        assert_eq!(class_from_dir_name("Pizza"), None);
        assert_eq!(class_from_file_name("7_123.jpg").unwrap().name(), "Rice");
        assert_eq!(split_from_dir_name("Validation"), Some(Split::Validation));
        assert_eq!(split_from_dir_name("test"), Some(Split::Evaluation));
    }

    #[test]
    fn subset_sizes() {
        assert_eq!(subset_size(994, 0.1), 100);
        assert_eq!(subset_size(280, 0.1), 28);
        assert_eq!(subset_size(5, 1.0), 5);
        assert_eq!(subset_size(3, 0.01), 1);
        assert_eq!(subset_size(0, 0.5), 0);
    }

    fn synthetic_index(per_class: usize) -> DatasetIndex {
        let split = |s: &str| SplitIndex {
            classes: (0..NUM_CLASSES)
                .map(|c| (0..per_class + c).map(|i| PathBuf::from(format!("{s}/{c}/{i:04}.jpg"))).collect())
                .collect(),
        };
        DatasetIndex {
            training: split("t"),
            validation: split("v"),
            evaluation: split("e"),
        }
    }

    #[test]
    fn subset_is_deterministic_and_proportional() {
        let idx = synthetic_index(40);
        assert_eq!(stratified_subset(&idx, 1.0, 3).unwrap(), idx);
        let a = stratified_subset(&idx, 0.25, 3).unwrap();
        assert_eq!(a, stratified_subset(&idx, 0.25, 3).unwrap());
        assert_ne!(a, stratified_subset(&idx, 0.25, 4).unwrap());
        for c in ClassLabel::all() {
            let n = idx.training.class(c).len();
            assert_eq!(a.training.class(c).len(), subset_size(n, 0.25));
            let mut sorted = a.training.class(c).to_vec();
            sorted.sort();
            assert_eq!(sorted, a.training.class(c));
        }
        assert!(stratified_subset(&idx, 0.0, 1).is_err());
        assert!(stratified_subset(&idx, 1.5, 1).is_err());
    }

    #[test]
    fn single_class_is_whole_subset() {
        let mut counts = [[0; NUM_CLASSES]; 3];
        for row in &mut counts {
            row[3] = 17;
        }
        let s = DatasetStats { counts };
        for split in Split::ALL {
            assert_eq!(s.pct_of_split(split, ClassLabel::new(3).unwrap()), 100.0);
        }
    }

    #[test]
    fn leakage_detected() {
        let mut idx = synthetic_index(2);
        assert!(idx.check_no_leakage().is_ok());
        let p = idx.training.classes[0][0].clone();
        idx.evaluation.classes[4].push(p);
        assert!(idx.check_no_leakage().is_err());
    }
}
