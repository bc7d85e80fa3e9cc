//! Occlusion explanations over superpixels.
//!
//! Each superpixel is zeroed in its own replica of the image; the change of
//! the predicted distribution, `p_i - p_0`, is spread over the superpixel's
//! pixels. Because superpixels partition the image, the map at a pixel is
//! the delta of the one superpixel containing it.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{contract_err, Result};
use crate::imaging::io::write_png_rgb;
use crate::imaging::{extract_superpixels, GrayImage, SuperpixelMap};
use crate::network::{AlignControl, AttentionMode, Model, ScoreDistribution};
use crate::scoring::{BrixiaScore, CLASSES, REGIONS, REGION_NAMES};

const CHANNELS: usize = REGIONS * CLASSES;
pub const DEFAULT_COMPACTNESS: f64 = 0.1;
/// Replicas evaluated per forward batch.
const REPLICA_BATCH: usize = 8;

#[derive(Clone, Debug)]
pub struct ExplanationMap {
    pub superpixels: SuperpixelMap,
    /// Prediction on the unmodified image.
    pub p0: ScoreDistribution,
    /// `p_i - p_0` for every superpixel `i`, region-major.
    pub deltas: Vec<[f32; CHANNELS]>,
    pub forward_passes: usize,
}

impl ExplanationMap {
    pub fn height(&self) -> usize {
        self.superpixels.height()
    }

    pub fn width(&self) -> usize {
        self.superpixels.width()
    }

    /// `E[y, x, region, class]`.
    pub fn value(&self, y: usize, x: usize, region: usize, class: usize) -> f32 {
        self.deltas[self.superpixels.label(y, x) as usize][region * CLASSES + class]
    }

    /// Dense `H × W × 6 × 4` array.
    pub fn dense(&self) -> Vec<f32> {
        self.superpixels
            .labels()
            .iter()
            .flat_map(|&l| self.deltas[l as usize])
            .collect()
    }

    /// `superpixel_id,region,class,delta` for every superpixel and channel.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("superpixel_id,region,class,delta\n");
        for (i, d) in self.deltas.iter().enumerate() {
            for r in 0..REGIONS {
                for c in 0..CLASSES {
                    let _ = writeln!(s, "{i},{},{c},{:e}", REGION_NAMES[r], d[r * CLASSES + c]);
                }
            }
        }
        s
    }
}

/// Zeroes every pixel of superpixel `label`.
pub fn occlude(img: &GrayImage, sp: &SuperpixelMap, label: u32) -> GrayImage {
    let mut out = img.clone();
    for (p, &l) in out.pixels_mut().iter_mut().zip(sp.labels()) {
        if l == label {
            *p = 0.0;
        }
    }
    out
}

/// Explanation over a given partition: one forward pass on `img` plus one
/// per superpixel.
pub fn explain_with(
    model: &Model,
    img: &GrayImage,
    sp: &SuperpixelMap,
    mode: AttentionMode,
) -> Result<ExplanationMap> {
    if (sp.height(), sp.width()) != (img.height(), img.width()) {
        return Err(contract_err!(
            "superpixel map does not match the image size"
        ));
    }
    let p0 = model
        .predict(&[img], mode, AlignControl::Estimated)?
        .remove(0)
        .dist;
    let base = p0.flat();
    let mut deltas = Vec::with_capacity(sp.count());
    let labels: Vec<u32> = (0..sp.count() as u32).collect();
    for chunk in labels.chunks(REPLICA_BATCH) {
        let replicas: Vec<GrayImage> = chunk.iter().map(|&l| occlude(img, sp, l)).collect();
        let refs: Vec<&GrayImage> = replicas.iter().collect();
        for p in model.predict(&refs, mode, AlignControl::Estimated)? {
            let pi = p.dist.flat();
            deltas.push(std::array::from_fn(|k| pi[k] - base[k]));
        }
    }
    Ok(ExplanationMap {
        superpixels: sp.clone(),
        p0,
        deltas,
        forward_passes: 1 + sp.count(),
    })
}

pub fn explanation_map(
    model: &Model,
    img: &GrayImage,
    n_superpixels: usize,
    mode: AttentionMode,
) -> Result<ExplanationMap> {
    let sp = extract_superpixels(img, n_superpixels, DEFAULT_COMPACTNESS)?;
    explain_with(model, img, &sp, mode)
}

/// Region used for colouring pixel `(y, x)`: the nearest band centre
/// vertically, the half horizontally.
pub fn pixel_region(y: usize, x: usize, h: usize, w: usize) -> usize {
    let v = (y as f64 + 0.5) / h as f64;
    let row = [0.2, 0.5, 0.8]
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
        .map(|(i, _)| i)
        .expect("three bands");
    let col = usize::from((x as f64 + 0.5) / w as f64 >= 0.5);
    row * 2 + col
}

pub const CLASS_COLORS: [[u8; 3]; CLASSES] = [[0, 160, 0], [255, 140, 0], [220, 0, 0], [0, 0, 0]];

/// Per-pixel supportiveness `r = p_0[k] - p_i[k]` of the predicted class
/// `k` of the pixel's region.
pub fn supportiveness(e: &ExplanationMap, pred: &BrixiaScore) -> Vec<f32> {
    let (h, w) = (e.height(), e.width());
    let cells = pred.cells();
    (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            let r = pixel_region(y, x, h, w);
            -e.value(y, x, r, cells[r] as usize)
        })
        .collect()
}

/// RGB overlay: white where removal does not lower the predicted class
/// probability, otherwise the class colour with opacity `r / max r`.
pub fn render_rgb(e: &ExplanationMap, pred: &BrixiaScore) -> Vec<u8> {
    let (h, w) = (e.height(), e.width());
    let r = supportiveness(e, pred);
    let max = r.iter().copied().fold(0.0f32, f32::max);
    let cells = pred.cells();
    let mut rgb = Vec::with_capacity(h * w * 3);
    for (p, &v) in r.iter().enumerate() {
        let (y, x) = (p / w, p % w);
        let color = CLASS_COLORS[cells[pixel_region(y, x, h, w)] as usize];
        let a = if v > 0.0 && max > 0.0 { v / max } else { 0.0 };
        for c in color {
            rgb.push((255.0 * (1.0 - a) + c as f32 * a).round() as u8);
        }
    }
    rgb
}

pub fn render_explanation(e: &ExplanationMap, pred: &BrixiaScore, out: &Path) -> Result<()> {
    write_png_rgb(out, e.width(), e.height(), &render_rgb(e, pred))
}
