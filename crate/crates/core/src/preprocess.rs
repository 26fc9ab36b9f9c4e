//! The deterministic evaluation transform: decode, bilinear resize to S×S,
//! scale to `[0, 1]` and normalize per channel.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MIN_INPUT_SIZE;
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRgb8 {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRgb8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::InvalidArgument(format!(
                "{} bytes for a {}x{} RGB image",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(ImageRgb8 {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Self::new(width, height, pixels)
    }

    /// Decodes a JPEG or PNG file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocConfig {
    pub size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PreprocConfig {
    pub fn imagenet(size: usize) -> Self {
        PreprocConfig {
            size,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_INPUT_SIZE {
            return Err(Error::Config(format!(
                "image size {} is below {}",
                self.size, MIN_INPUT_SIZE
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("normalization std must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centers (align-corners off). The image is
/// stretched to `size × size`; aspect ratio is not preserved.
pub fn resize_bilinear(img: &ImageRgb8, size: usize) -> Result<ImageRgb8> {
    resize_bilinear_to(img, size, size)
}

struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(out_len: usize, in_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn resize_bilinear_to(img: &ImageRgb8, width: usize, height: usize) -> Result<ImageRgb8> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("resize target must be non-empty".into()));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let xs = taps(width, img.width);
    let ys = taps(height, img.height);
    let mut pixels = Vec::with_capacity(3 * width * height);
    for ty in &ys {
        for tx in &xs {
            for c in 0..3 {
                let p00 = img.get(tx.lo, ty.lo, c) as f64;
                let p01 = img.get(tx.hi, ty.lo, c) as f64;
                let p10 = img.get(tx.lo, ty.hi, c) as f64;
                let p11 = img.get(tx.hi, ty.hi, c) as f64;
                let top = p00 + (p01 - p00) * tx.frac;
                let bottom = p10 + (p11 - p10) * tx.frac;
                let v = top + (bottom - top) * ty.frac;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRgb8::new(width, height, pixels)
}

/// `(pixel / 255 - mean_c) / std_c`, channels R, G, B → 0, 1, 2.
pub fn to_tensor_normalize(img: &ImageRgb8, cfg: &PreprocConfig) -> Result<Tensor> {
    if img.width != cfg.size || img.height != cfg.size {
        return Err(Error::shape(
            "to_tensor_normalize",
            format!("image is {}x{}, expected {}x{}", img.width, img.height, cfg.size, cfg.size),
        ));
    }
    let plane = cfg.size * cfg.size;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            let v = (px[c] as f64 / 255.0 - cfg.mean[c] as f64) / cfg.std[c] as f64;
            data[c * plane + i] = v as f32;
        }
    }
    Tensor::from_vec([1, 3, cfg.size, cfg.size], data)
}

/// Resize then normalize.
pub fn main_transform(img: &ImageRgb8, cfg: &PreprocConfig) -> Result<Tensor> {
    to_tensor_normalize(&resize_bilinear(img, cfg.size)?, cfg)
}
