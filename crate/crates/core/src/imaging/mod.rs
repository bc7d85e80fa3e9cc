//! Grayscale images, normalization, augmentation and superpixels.

mod augment;
pub mod io;
mod normalize;
mod superpixel;

pub use augment::{augment, AugmentConfig, AugmentPolicy, Augmented, SamplingMap};
pub use normalize::{clahe, median3, normalize_cxr, percentile, percentile_clip_rescale};
pub use superpixel::{extract_superpixels, SuperpixelMap};

use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Row-major single-channel float image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

/// Per-pixel lung probability; same layout as [`GrayImage`].
pub type ProbMask = GrayImage;

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(contract_err!(
                "image must be non-empty, got {height}x{width}"
            ));
        }
        if pixels.len() != height * width {
            return Err(contract_err!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            ));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(contract_err!("non-finite pixel at index {i}"));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn threshold(&self, t: f32) -> Self {
        self.map(|v| if v >= t { 1.0 } else { 0.0 })
    }

    pub fn hflip(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    /// Bilinear resize (pixel-centre aligned).
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        Self::from_fn(height, width, |y, x| {
            self.sample_clamped((y as f32 + 0.5) * sy - 0.5, (x as f32 + 0.5) * sx - 0.5)
        })
    }

    /// Bilinear read at fractional pixel coordinates, clamped to the border.
    pub fn sample_clamped(&self, y: f32, x: f32) -> f32 {
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bot = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear read at fractional pixel coordinates; outside corners read
    /// `fill`.
    pub fn sample_or(&self, y: f32, x: f32, fill: f32) -> f32 {
        let (fy0, fx0) = (y.floor(), x.floor());
        let (fy, fx) = (y - fy0, x - fx0);
        let (y0, x0) = (fy0 as isize, fx0 as isize);
        let px = |yy: isize, xx: isize| {
            if yy >= 0 && xx >= 0 && (yy as usize) < self.height && (xx as usize) < self.width {
                self.get(yy as usize, xx as usize)
            } else {
                fill
            }
        };
        let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
        let bot = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.pixels.clone()).expect("non-empty")
    }

    /// Stacks equally sized images into `[N, 1, H, W]`.
    pub fn stack(images: &[&GrayImage]) -> Result<Tensor> {
        let Some(first) = images.first() else {
            return Err(contract_err!("cannot stack zero images"));
        };
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            if (im.height, im.width) != (h, w) {
                return Err(contract_err!(
                    "cannot stack {}x{} with {h}x{w}",
                    im.height,
                    im.width
                ));
            }
            data.extend_from_slice(&im.pixels);
        }
        Tensor::new(&[images.len(), 1, h, w], data)
    }
}

/// Dice and IoU of two binary masks thresholded at 0.5. Two empty masks
/// agree perfectly.
pub fn overlap_metrics(pred: &ProbMask, target: &ProbMask) -> Result<(f64, f64)> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(crate::error::shape_err!(
            "overlap: {}x{} vs {}x{}",
            pred.height,
            pred.width,
            target.height,
            target.width
        ));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.pixels.iter().zip(&target.pixels) {
        let (a, b) = (a >= 0.5, b >= 0.5);
        p += a as usize;
        t += b as usize;
        inter += (a && b) as usize;
    }
    if p + t == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * inter as f64 / (p + t) as f64;
    let iou = inter as f64 / (p + t - inter) as f64;
    Ok((dice, iou))
}
