//! Geometric and photometric augmentation applied identically to an image,
//! its lung mask and (for flips) its score.
//!
//! Displacement magnitudes are given for a 512-pixel reference frame and
//! scaled linearly to the actual image size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GrayImage, ProbMask};
use crate::error::{contract_err, Error, Result};
use crate::scoring::{flip_score, BrixiaScore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentPolicy {
    None,
    Photometric,
    Geometric,
    All,
}

impl std::str::FromStr for AugmentPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "photometric" => Ok(Self::Photometric),
            "geometric" => Ok(Self::Geometric),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!(
                "unknown augmentation policy `{s}` (none|photometric|geometric|all)"
            ))),
        }
    }
}

impl AugmentPolicy {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Photometric => "photometric",
            Self::Geometric => "geometric",
            Self::All => "all",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub max_scale: f64,
    pub max_shift: f64,
    pub p_rotate: f64,
    pub p_scale: f64,
    pub p_shift: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub p_elastic: f64,
    pub grid_steps: usize,
    pub grid_limit: f64,
    pub p_grid: f64,
    pub optical_distort: f64,
    pub optical_shift: f64,
    pub p_optical: f64,
    pub hflip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub p_photometric: f64,
    /// Image size the displacement magnitudes refer to.
    pub reference_size: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 25.0,
            max_scale: 0.10,
            max_shift: 0.10,
            p_rotate: 0.8,
            p_scale: 0.8,
            p_shift: 0.8,
            elastic_alpha: 60.0,
            elastic_sigma: 12.0,
            p_elastic: 0.2,
            grid_steps: 5,
            grid_limit: 0.3,
            p_grid: 0.2,
            optical_distort: 0.2,
            optical_shift: 0.05,
            p_optical: 0.2,
            hflip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            p_photometric: 0.8,
            reference_size: 512.0,
        }
    }
}

impl AugmentConfig {
    /// Every probability zero: augmentation is the identity.
    pub fn disabled() -> Self {
        Self {
            p_rotate: 0.0,
            p_scale: 0.0,
            p_shift: 0.0,
            p_elastic: 0.0,
            p_grid: 0.0,
            p_optical: 0.0,
            hflip_prob: 0.0,
            p_photometric: 0.0,
            ..Self::default()
        }
    }

    pub fn for_policy(policy: AugmentPolicy) -> Self {
        let full = Self::default();
        let off = Self::disabled();
        match policy {
            AugmentPolicy::None => off,
            AugmentPolicy::Photometric => Self {
                p_photometric: full.p_photometric,
                ..off
            },
            AugmentPolicy::Geometric => Self {
                p_photometric: 0.0,
                ..full
            },
            AugmentPolicy::All => full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_rotate,
            self.p_scale,
            self.p_shift,
            self.p_elastic,
            self.p_grid,
            self.p_optical,
            self.hflip_prob,
            self.p_photometric,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(contract_err!(
                "augmentation probabilities must lie in [0, 1]"
            ));
        }
        let mags = [
            self.max_rotation_deg,
            self.max_scale,
            self.max_shift,
            self.elastic_alpha,
            self.elastic_sigma,
            self.grid_limit,
            self.optical_distort,
            self.optical_shift,
            self.brightness,
            self.contrast,
        ];
        if mags.iter().any(|m| !(m.is_finite() && *m >= 0.0)) || self.reference_size <= 0.0 {
            return Err(contract_err!(
                "augmentation magnitudes must be non-negative"
            ));
        }
        Ok(())
    }
}

/// Source pixel coordinate `(y, x)` for every output pixel.
#[derive(Clone, Debug)]
pub struct SamplingMap {
    height: usize,
    width: usize,
    coords: Vec<(f32, f32)>,
}

impl SamplingMap {
    pub fn identity(height: usize, width: usize) -> Self {
        let coords = (0..height * width)
            .map(|i| ((i / width) as f32, (i % width) as f32))
            .collect();
        Self {
            height,
            width,
            coords,
        }
    }

    /// Bilinear resampling; samples falling outside read `fill`.
    pub fn apply(&self, img: &GrayImage, fill: f32) -> GrayImage {
        assert_eq!(
            (img.height(), img.width()),
            (self.height, self.width),
            "map size"
        );
        let pixels = self
            .coords
            .iter()
            .map(|&(y, x)| img.sample_or(y, x, fill))
            .collect();
        GrayImage::new(self.height, self.width, pixels).expect("finite samples")
    }

    fn compose(&mut self, f: impl Fn(f32, f32) -> (f32, f32)) {
        for c in &mut self.coords {
            *c = f(c.0, c.1);
        }
    }
}

pub struct Augmented {
    pub image: GrayImage,
    pub mask: Option<ProbMask>,
    pub score: Option<BrixiaScore>,
}

fn gaussian_blur(field: &mut [f32], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0f32; field.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                s += kv * field[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                s += kv * tmp[yy * w + x];
            }
            field[y * w + x] = s;
        }
    }
}

/// Piecewise-linear axis remap: `steps` uniform cells become cells of size
/// `1 + U(-limit, limit)`, renormalized to the full extent.
fn grid_axis(rng: &mut ChaCha8Rng, steps: usize, limit: f64, n: usize) -> Vec<f32> {
    let sizes: Vec<f64> = (0..steps)
        .map(|_| 1.0 + rng.random_range(-limit..=limit))
        .collect();
    let total: f64 = sizes.iter().sum();
    let mut knots = vec![0.0f64];
    for s in &sizes {
        knots.push(knots.last().unwrap() + s / total);
    }
    let span = (n - 1).max(1) as f64;
    (0..n)
        .map(|i| {
            let u = i as f64 / span;
            let cell = ((u * steps as f64) as usize).min(steps - 1);
            let t = u * steps as f64 - cell as f64;
            ((knots[cell] + t * (knots[cell + 1] - knots[cell])) * span) as f32
        })
        .collect()
}

/// Draws a geometric map for an `h × w` image. Returns `None` when no
/// geometric transform fired.
fn draw_geometry(
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
) -> Option<SamplingMap> {
    let scale_px = (h.max(w) as f64) / cfg.reference_size;
    let mut fired = false;
    let mut draw = |p: f64, rng: &mut ChaCha8Rng| {
        let hit = p > 0.0 && rng.random_bool(p);
        fired |= hit;
        hit
    };
    let angle = if draw(cfg.p_rotate, rng) {
        rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
            .to_radians()
    } else {
        0.0
    };
    let zoom = if draw(cfg.p_scale, rng) {
        1.0 + rng.random_range(-cfg.max_scale..=cfg.max_scale)
    } else {
        1.0
    };
    let (sy, sx) = if draw(cfg.p_shift, rng) {
        (
            rng.random_range(-cfg.max_shift..=cfg.max_shift) * h as f64,
            rng.random_range(-cfg.max_shift..=cfg.max_shift) * w as f64,
        )
    } else {
        (0.0, 0.0)
    };
    let elastic = draw(cfg.p_elastic, rng);
    let grid = draw(cfg.p_grid, rng);
    let optical = draw(cfg.p_optical, rng);
    if !fired {
        return None;
    }

    let mut map = SamplingMap::identity(h, w);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    if angle != 0.0 || zoom != 1.0 || sy != 0.0 || sx != 0.0 {
        // inverse map: output -> source
        let (c, s) = (angle.cos() / zoom, angle.sin() / zoom);
        map.compose(|y, x| {
            let (dy, dx) = (y as f64 - cy - sy, x as f64 - cx - sx);
            ((cy + c * dy - s * dx) as f32, (cx + s * dy + c * dx) as f32)
        });
    }
    if elastic {
        let alpha = (cfg.elastic_alpha * scale_px) as f32;
        let sigma = cfg.elastic_sigma * scale_px;
        let mut fy: Vec<f32> = (0..h * w)
            .map(|_| rng.random_range(-1.0f32..=1.0))
            .collect();
        let mut fx: Vec<f32> = (0..h * w)
            .map(|_| rng.random_range(-1.0f32..=1.0))
            .collect();
        gaussian_blur(&mut fy, h, w, sigma);
        gaussian_blur(&mut fx, h, w, sigma);
        for (i, c) in map.coords.iter_mut().enumerate() {
            c.0 += alpha * fy[i];
            c.1 += alpha * fx[i];
        }
    }
    if grid && cfg.grid_steps > 0 {
        let gy = grid_axis(rng, cfg.grid_steps, cfg.grid_limit, h);
        let gx = grid_axis(rng, cfg.grid_steps, cfg.grid_limit, w);
        let lerp = |g: &[f32], v: f32| {
            let v = v.clamp(0.0, (g.len() - 1) as f32);
            let i = (v.floor() as usize).min(g.len().saturating_sub(2));
            let t = v - i as f32;
            if g.len() == 1 {
                g[0]
            } else {
                g[i] + t * (g[i + 1] - g[i])
            }
        };
        map.compose(|y, x| {
            let inside = y >= 0.0 && x >= 0.0 && y <= (h - 1) as f32 && x <= (w - 1) as f32;
            if inside {
                (lerp(&gy, y), lerp(&gx, x))
            } else {
                (y, x)
            }
        });
    }
    if optical {
        let k = rng.random_range(-cfg.optical_distort..=cfg.optical_distort);
        let oy = cy + rng.random_range(-cfg.optical_shift..=cfg.optical_shift) * h as f64;
        let ox = cx + rng.random_range(-cfg.optical_shift..=cfg.optical_shift) * w as f64;
        let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
        map.compose(|y, x| {
            let (ny, nx) = ((y as f64 - oy) / ry, (x as f64 - ox) / rx);
            let f = 1.0 + k * (ny * ny + nx * nx);
            ((oy + ny * f * ry) as f32, (ox + nx * f * rx) as f32)
        });
    }
    Some(map)
}

/// Applies one random draw of `cfg` (seeded) to the image and, when given,
/// to the mask and score. A horizontal flip swaps the score's columns.
pub fn augment(
    img: &GrayImage,
    mask: Option<&ProbMask>,
    score: Option<&BrixiaScore>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Augmented> {
    cfg.validate()?;
    if let Some(m) = mask {
        if (m.height(), m.width()) != (img.height(), img.width()) {
            return Err(contract_err!(
                "mask {}x{} does not match image {}x{}",
                m.height(),
                m.width(),
                img.height(),
                img.width()
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob);
    let geometry = draw_geometry(cfg, &mut rng, img.height(), img.width());
    let photometric = if cfg.p_photometric > 0.0 && rng.random_bool(cfg.p_photometric) {
        let b = rng.random_range(-cfg.brightness..=cfg.brightness);
        let c = 1.0 + rng.random_range(-cfg.contrast..=cfg.contrast);
        Some((b as f32, c as f32))
    } else {
        None
    };

    let mut image = if flip { img.hflip() } else { img.clone() };
    let mut mask = mask.map(|m| if flip { m.hflip() } else { m.clone() });
    let score = score.map(|s| if flip { flip_score(s) } else { *s });
    if let Some(map) = &geometry {
        image = map.apply(&image, 0.0);
        mask = mask.map(|m| map.apply(&m, 0.0).map(|v| v.clamp(0.0, 1.0)));
    }
    if let Some((b, c)) = photometric {
        let mean = image.mean() as f32;
        image = image.map(|v| ((v - mean) * c + mean + b).clamp(0.0, 1.0));
    }
    Ok(Augmented { image, mask, score })
}
