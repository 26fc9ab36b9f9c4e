//! Training-time randomized transform: rotation, horizontal flip, color jitter
//! and random erasing, applied in that order to an RGB8 image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::ImageRgb8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation angle is uniform in `±rotation_degrees`.
    pub rotation_degrees: f32,
    pub flip_prob: f64,
    /// Multiplicative factor ranges; `[1, 1]` disables the component.
    pub brightness: [f32; 2],
    pub contrast: [f32; 2],
    pub saturation: [f32; 2],
    pub erase_prob: f64,
    /// Erased rectangle covers a uniform fraction of the image area in this range.
    pub erase_area: [f32; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_degrees: 15.0,
            flip_prob: 0.5,
            brightness: [0.8, 1.2],
            contrast: [0.8, 1.2],
            saturation: [0.8, 1.2],
            erase_prob: 0.25,
            erase_area: [0.02, 0.10],
        }
    }
}

impl AugmentConfig {
    /// A configuration that leaves every image untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_degrees: 0.0,
            flip_prob: 0.0,
            brightness: [1.0, 1.0],
            contrast: [1.0, 1.0],
            saturation: [1.0, 1.0],
            erase_prob: 0.0,
            erase_area: [0.02, 0.10],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.flip_prob) || !prob_ok(self.erase_prob) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(0.0..=180.0).contains(&self.rotation_degrees) {
            return Err(Error::Config("rotation must lie in [0, 180] degrees".into()));
        }
        for (name, r) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1] <= 10.0) {
                return Err(Error::Config(format!("{name} range {r:?} is invalid")));
            }
        }
        let a = self.erase_area;
        if !(a[0] > 0.0 && a[0] <= a[1] && a[1] <= 1.0) {
            return Err(Error::Config(format!("erase area range {a:?} is invalid")));
        }
        Ok(())
    }
}

fn sample_range<R: Rng>(rng: &mut R, r: [f32; 2]) -> f32 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

/// Applies the configured augmentations. Output depends only on the image, the
/// config and the rng state; dimensions never change.
pub fn augment<R: Rng>(img: &ImageRgb8, cfg: &AugmentConfig, rng: &mut R) -> ImageRgb8 {
    let mut out = img.clone();
    if cfg.rotation_degrees > 0.0 {
        let angle = rng.gen_range(-cfg.rotation_degrees..=cfg.rotation_degrees);
        if angle != 0.0 {
            out = rotate(&out, angle);
        }
    }
    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        flip_horizontal(&mut out);
    }
    let b = sample_range(rng, cfg.brightness);
    let c = sample_range(rng, cfg.contrast);
    let s = sample_range(rng, cfg.saturation);
    if b != 1.0 {
        adjust_brightness(&mut out, b);
    }
    if c != 1.0 {
        adjust_contrast(&mut out, c);
    }
    if s != 1.0 {
        adjust_saturation(&mut out, s);
    }
    if cfg.erase_prob > 0.0 && rng.gen_bool(cfg.erase_prob) {
        random_erase(&mut out, cfg.erase_area, rng);
    }
    out
}

pub fn flip_horizontal(img: &mut ImageRgb8) {
    let w = img.width();
    for row in img.pixels_mut().chunks_exact_mut(3 * w) {
        for x in 0..w / 2 {
            for c in 0..3 {
                row.swap(3 * x + c, 3 * (w - 1 - x) + c);
            }
        }
    }
}

/// Rotates about the image center by `degrees` (counter-clockwise), sampling
/// bilinearly and filling uncovered pixels with black.
pub fn rotate(img: &ImageRgb8, degrees: f32) -> ImageRgb8 {
    let (w, h) = (img.width(), img.height());
    let theta = (degrees as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let sample = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            img.get(x as usize, y as usize, c) as f64
        }
    };
    let mut pixels = vec![0u8; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // inverse rotation in image coordinates (y down)
            let sx = cos * dx - sin * dy + cx - 0.5;
            let sy = sin * dx + cos * dy + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..3 {
                let top = sample(x0, y0, c) * (1.0 - fx) + sample(x0 + 1, y0, c) * fx;
                let bottom = sample(x0, y0 + 1, c) * (1.0 - fx) + sample(x0 + 1, y0 + 1, c) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels[(y * w + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageRgb8::new(w, h, pixels).expect("same dimensions")
}

#[inline]
fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[inline]
fn luma(p: &[u8]) -> f32 {
    0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
}

pub fn adjust_brightness(img: &mut ImageRgb8, factor: f32) {
    for v in img.pixels_mut() {
        *v = to_u8(*v as f32 * factor);
    }
}

/// Blends each pixel with the image's mean luma.
pub fn adjust_contrast(img: &mut ImageRgb8, factor: f32) {
    let px = img.pixels();
    let mean = px.chunks_exact(3).map(|p| luma(p) as f64).sum::<f64>() / (px.len() / 3) as f64;
    let mean = mean as f32;
    for v in img.pixels_mut() {
        *v = to_u8((*v as f32 - mean) * factor + mean);
    }
}

/// Blends each pixel with its own luma.
pub fn adjust_saturation(img: &mut ImageRgb8, factor: f32) {
    for p in img.pixels_mut().chunks_exact_mut(3) {
        let g = luma(p);
        for v in p.iter_mut() {
            *v = to_u8((*v as f32 - g) * factor + g);
        }
    }
}

/// Zeroes a rectangle whose area is a uniform fraction in `area` of the image and
/// whose aspect ratio is log-uniform in `[0.3, 3.3]`.
pub fn random_erase<R: Rng>(img: &mut ImageRgb8, area: [f32; 2], rng: &mut R) {
    let (w, h) = (img.width(), img.height());
    let target = sample_range(rng, area) as f64 * (w * h) as f64;
    let log_ratio = rng.gen_range((0.3f64).ln()..=(3.3f64).ln());
    let ratio = log_ratio.exp();
    let eh = ((target * ratio).sqrt().round() as usize).clamp(1, h);
    let ew = ((target / ratio).sqrt().round() as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - eh);
    let x0 = rng.gen_range(0..=w - ew);
    let px = img.pixels_mut();
    for y in y0..y0 + eh {
        px[(y * w + x0) * 3..(y * w + x0 + ew) * 3].fill(0);
    }
}
