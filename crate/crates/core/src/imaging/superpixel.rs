//! Grid-seeded SLIC clustering on intensity and position.

use super::GrayImage;
use crate::error::{contract_err, Result};

const ITERATIONS: usize = 10;

/// Partition of an image into `count` connected labels `0..count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    count: usize,
}

impl SuperpixelMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Flat pixel indices of every label, in raster order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }
}

/// Clusters pixels on `(intensity, y, x)` with distance
/// `dI² + (compactness · d_xy / S)²`, `S` being the seed spacing; then
/// merges fragments smaller than a quarter cell into a neighbour so every
/// label is connected.
pub fn extract_superpixels(
    img: &GrayImage,
    n_target: usize,
    compactness: f64,
) -> Result<SuperpixelMap> {
    let (h, w) = (img.height(), img.width());
    if n_target == 0 || n_target > h * w {
        return Err(contract_err!(
            "superpixel count {n_target} outside 1..={} for a {h}x{w} image",
            h * w
        ));
    }
    if !(compactness.is_finite() && compactness >= 0.0) {
        return Err(contract_err!("compactness must be a non-negative number"));
    }
    if n_target == 1 {
        return Ok(SuperpixelMap {
            height: h,
            width: w,
            labels: vec![0; h * w],
            count: 1,
        });
    }

    let nx = ((n_target as f64 * w as f64 / h as f64).sqrt().round() as usize).clamp(1, w);
    let ny = ((n_target as f64 / nx as f64).round() as usize).clamp(1, h);
    let step = ((h * w) as f64 / (nx * ny) as f64).sqrt();
    let m2 = (compactness / step).powi(2);

    // centres: (intensity, y, x)
    let mut centres: Vec<[f64; 3]> = Vec::with_capacity(nx * ny);
    for i in 0..ny {
        for j in 0..nx {
            let y = ((2 * i + 1) * h / (2 * ny)).min(h - 1);
            let x = ((2 * j + 1) * w / (2 * nx)).min(w - 1);
            centres.push([img.get(y, x) as f64, y as f64, x as f64]);
        }
    }

    let radius = (2.0 * step).ceil() as isize;
    let mut labels = vec![0u32; h * w];
    let mut dist = vec![f64::INFINITY; h * w];
    for _ in 0..ITERATIONS {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centres.iter().enumerate() {
            let (cy, cx) = (c[1].round() as isize, c[2].round() as isize);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius + 1).min(h as isize)) as usize;
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius + 1).min(w as isize)) as usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    let di = img.get(y, x) as f64 - c[0];
                    let dy = y as f64 - c[1];
                    let dx = x as f64 - c[2];
                    let d = di * di + m2 * (dy * dy + dx * dx);
                    let p = y * w + x;
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k as u32;
                    }
                }
            }
        }
        // pixels out of every window keep their previous label
        let mut sums = vec![[0.0f64; 4]; centres.len()];
        for (p, &l) in labels.iter().enumerate() {
            let s = &mut sums[l as usize];
            s[0] += img.pixels()[p] as f64;
            s[1] += (p / w) as f64;
            s[2] += (p % w) as f64;
            s[3] += 1.0;
        }
        for (c, s) in centres.iter_mut().zip(&sums) {
            if s[3] > 0.0 {
                *c = [s[0] / s[3], s[1] / s[3], s[2] / s[3]];
            }
        }
    }

    let min_size = ((step * step) / 4.0).max(1.0) as usize;
    let (labels, count) = enforce_connectivity(&labels, h, w, min_size);
    Ok(SuperpixelMap {
        height: h,
        width: w,
        labels,
        count,
    })
}

/// Relabels 4-connected components in raster order; components smaller than
/// `min_size` join the previously labelled neighbour.
fn enforce_connectivity(labels: &[u32], h: usize, w: usize, min_size: usize) -> (Vec<u32>, usize) {
    const UNSET: u32 = u32::MAX;
    let mut out = vec![UNSET; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    let mut comp = Vec::new();
    for start in 0..h * w {
        if out[start] != UNSET {
            continue;
        }
        let (sy, sx) = (start / w, start % w);
        // adjacent already-final label, used if this component is too small
        let adjacent = [(sx > 0).then(|| start - 1), (sy > 0).then(|| start - w)]
            .into_iter()
            .flatten()
            .map(|p| out[p])
            .find(|&l| l != UNSET);

        comp.clear();
        stack.push(start);
        out[start] = next;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let nbrs = [
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
            ];
            for q in nbrs.into_iter().flatten() {
                if out[q] == UNSET && labels[q] == labels[start] {
                    out[q] = next;
                    stack.push(q);
                }
            }
        }
        match adjacent {
            Some(l) if comp.len() < min_size => comp.iter().for_each(|&p| out[p] = l),
            _ => next += 1,
        }
    }
    (out, next as usize)
}
