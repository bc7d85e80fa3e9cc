//! Radiograph normalization: CLAHE, 3×3 median, 2/98 percentile clip and
//! rescale to [0, 1].

use super::GrayImage;

const TILES: usize = 8;
const BINS: usize = 256;
const CLIP: f64 = 0.01;

/// Full normalization chain. An image whose pixels are all equal is
/// returned unchanged.
pub fn normalize_cxr(img: &GrayImage) -> GrayImage {
    let first = img.pixels()[0];
    if img.pixels().iter().all(|&v| v == first) {
        return img.clone();
    }
    let eq = clahe(img, TILES, BINS, CLIP);
    let smooth = median3(&eq);
    percentile_clip_rescale(&smooth, 2.0, 98.0)
}

/// Tile boundaries `[start, end)` splitting `n` into `t` near-equal parts.
fn tile_bounds(n: usize, t: usize) -> Vec<(usize, usize)> {
    (0..t).map(|i| (i * n / t, (i + 1) * n / t)).collect()
}

/// For coordinate `p`, the two neighbouring tile centres and the weight of
/// the second, clamped beyond the outermost centres.
fn interp(centres: &[f64], p: f64) -> (usize, usize, f64) {
    let last = centres.len() - 1;
    if p <= centres[0] {
        return (0, 0, 0.0);
    }
    if p >= centres[last] {
        return (last, last, 0.0);
    }
    let i = centres
        .windows(2)
        .position(|w| p < w[1])
        .expect("p inside range");
    (i, i + 1, (p - centres[i]) / (centres[i + 1] - centres[i]))
}

/// Contrast-limited adaptive histogram equalization on a `[0,1]` image.
///
/// Each of `tiles × tiles` regions gets a `bins`-bin histogram; counts above
/// `max(1, clip · tile pixels)` are cut and the excess spread evenly over
/// all bins. The tile's mapping is its normalized cumulative histogram, and
/// every pixel blends the mappings of the four nearest tile centres.
pub fn clahe(img: &GrayImage, tiles: usize, bins: usize, clip: f64) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    let (ty, tx) = (tiles.min(h).max(1), tiles.min(w).max(1));
    let rows = tile_bounds(h, ty);
    let cols = tile_bounds(w, tx);
    let bin_of = |v: f32| ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1);

    let mut maps = vec![vec![0.0f64; bins]; ty * tx];
    for (i, &(y0, y1)) in rows.iter().enumerate() {
        for (j, &(x0, x1)) in cols.iter().enumerate() {
            let mut hist = vec![0.0f64; bins];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin_of(img.get(y, x))] += 1.0;
                }
            }
            let npix = ((y1 - y0) * (x1 - x0)) as f64;
            let limit = (clip * npix).max(1.0);
            let mut excess = 0.0;
            for c in hist.iter_mut() {
                if *c > limit {
                    excess += *c - limit;
                    *c = limit;
                }
            }
            let share = excess / bins as f64;
            let map = &mut maps[i * tx + j];
            let mut acc = 0.0;
            for (m, c) in map.iter_mut().zip(&hist) {
                acc += c + share;
                *m = acc / npix;
            }
        }
    }

    let centre = |&(a, b): &(usize, usize)| (a + b - 1) as f64 / 2.0;
    let cy: Vec<f64> = rows.iter().map(centre).collect();
    let cx: Vec<f64> = cols.iter().map(centre).collect();
    let xs: Vec<(usize, usize, f64)> = (0..w).map(|x| interp(&cx, x as f64)).collect();
    GrayImage::from_fn(h, w, |y, x| {
        let (i0, i1, fy) = interp(&cy, y as f64);
        let (j0, j1, fx) = xs[x];
        let b = bin_of(img.get(y, x));
        let m = |i: usize, j: usize| maps[i * tx + j][b];
        let top = m(i0, j0) * (1.0 - fx) + m(i0, j1) * fx;
        let bot = m(i1, j0) * (1.0 - fx) + m(i1, j1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

/// 3×3 median with replicated borders.
pub fn median3(img: &GrayImage) -> GrayImage {
    let (h, w) = (img.height() as isize, img.width() as isize);
    GrayImage::from_fn(img.height(), img.width(), |y, x| {
        let mut win = [0.0f32; 9];
        let mut k = 0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let yy = (y as isize + dy).clamp(0, h - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w - 1) as usize;
                win[k] = img.get(yy, xx);
                k += 1;
            }
        }
        win.sort_by(f32::total_cmp);
        win[4]
    })
}

/// `p`-th percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f32], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let rank = p.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Clips to the `[lo_p, hi_p]` percentile range and rescales it to [0, 1].
/// A collapsed range leaves the image as is.
pub fn percentile_clip_rescale(img: &GrayImage, lo_p: f64, hi_p: f64) -> GrayImage {
    let lo = percentile(img.pixels(), lo_p);
    let hi = percentile(img.pixels(), hi_p);
    if hi - lo <= 1e-12 {
        return img.clone();
    }
    img.map(|v| ((v as f64).clamp(lo, hi) - lo) as f32 / (hi - lo) as f32)
}
