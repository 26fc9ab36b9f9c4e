#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Directory spellings seen in different Food-11 redistributions.
pub const CLASS_DIRS: [&str; 11] = [
    "Bread",
    "Dairy product",
    "2_Dessert",
    "Egg",
    "Fried food",
    "Meat",
    "Noodles-Pasta",
    "Rice",
    "Seafood",
    "Soup",
    "Vegetable-Fruit",
];

/// Writes a small PNG whose colors depend on `class` and `i`.
pub fn write_png(path: &Path, class: usize, i: usize) {
    let mut img = RgbImage::new(40, 36);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let base = (class * 23 + i * 7) as u32;
        *p = Rgb([
            ((base + x * 5) % 256) as u8,
            ((base * 3 + y * 6) % 256) as u8,
            ((base * 5 + (x + y) * 2) % 256) as u8,
        ]);
    }
    img.save(path).unwrap();
}

/// A miniature Food-11 tree with `per_class` images per class and split.
pub fn mini_food11(root: &Path, per_class: usize) {
    for split in ["training", "validation", "evaluation"] {
        for (c, dir) in CLASS_DIRS.iter().enumerate() {
            let d = root.join(split).join(dir);
            std::fs::create_dir_all(&d).unwrap();
            for i in 0..per_class {
                write_png(&d.join(format!("{i:03}.png")), c, i);
            }
        }
    }
}
