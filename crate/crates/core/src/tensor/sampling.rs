//! Affine sampling grids, bilinear grid sampling, and fixed-box ROI pooling.
//!
//! Normalized coordinates follow the pixel-centre convention: pixel `j` of a
//! row of width `W` sits at `x = (2j + 1) / W - 1`, so an identity grid lands
//! exactly on pixel centres and resampling with it is lossless.

use super::float::Float;

/// Relative vertical overlap between adjacent lung bands.
pub const BAND_OVERLAP: f64 = 0.25;

pub fn identity_theta<T: Float>() -> [T; 6] {
    [
        T::one(),
        T::zero(),
        T::zero(),
        T::zero(),
        T::one(),
        T::zero(),
    ]
}

#[inline]
fn norm_coord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Sampling coordinates `(x, y)` for one 2×3 affine map, laid out `H×W×2`.
pub fn affine_grid_values<T: Float>(theta: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        let yn = T::lit(norm_coord(i, h));
        for j in 0..w {
            let xn = T::lit(norm_coord(j, w));
            out.push(theta[0] * xn + theta[1] * yn + theta[2]);
            out.push(theta[3] * xn + theta[4] * yn + theta[5]);
        }
    }
    out
}

pub(crate) fn affine_grid_backward<T: Float>(dgrid: &[T], h: usize, w: usize, dtheta: &mut [T]) {
    for i in 0..h {
        let yn = T::lit(norm_coord(i, h));
        for j in 0..w {
            let xn = T::lit(norm_coord(j, w));
            let gx = dgrid[(i * w + j) * 2];
            let gy = dgrid[(i * w + j) * 2 + 1];
            dtheta[0] += gx * xn;
            dtheta[1] += gx * yn;
            dtheta[2] += gx;
            dtheta[3] += gy * xn;
            dtheta[4] += gy * yn;
            dtheta[5] += gy;
        }
    }
}

/// Bilinear footprint of one sampling location. Corners outside the image
/// carry no weight; locations outside `[-1, 1]` have no footprint at all.
struct Footprint<T> {
    x0: isize,
    y0: isize,
    wx1: T,
    wy1: T,
    /// d(pixel x)/d(normalized x) and the same for y.
    sx: T,
    sy: T,
}

/// Pulls a pixel coordinate within rounding distance of a pixel centre onto
/// it, so identity and integer-shift grids resample without blending.
#[inline]
fn snap<T: Float>(v: T) -> T {
    let r = v.round();
    if (v - r).abs() < T::lit(SNAP_TOL) {
        r
    } else {
        v
    }
}

const SNAP_TOL: f64 = 1e-4;

#[inline]
fn footprint<T: Float>(gx: T, gy: T, h: usize, w: usize) -> Option<Footprint<T>> {
    let one = T::one();
    if !(gx >= -one && gx <= one && gy >= -one && gy <= one) {
        return None;
    }
    let half = T::lit(0.5);
    let ix = snap(((gx + one) * T::lit(w as f64) - one) * half);
    let iy = snap(((gy + one) * T::lit(h as f64) - one) * half);
    let fx = ix.floor();
    let fy = iy.floor();
    Some(Footprint {
        x0: fx.as_f64() as isize,
        y0: fy.as_f64() as isize,
        wx1: ix - fx,
        wy1: iy - fy,
        sx: T::lit(w as f64) * half,
        sy: T::lit(h as f64) * half,
    })
}

#[inline]
fn pixel<T: Float>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

/// `out[n, c, i, j] = bilinear(input[n, c], grid[n, i, j])`.
pub(crate) fn grid_sample_forward<T: Float>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    grid: &[T],
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * ho * wo];
    let one = T::one();
    for b in 0..n {
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let Some(f) = footprint(grid[gi], grid[gi + 1], h, w) else {
                continue;
            };
            for ch in 0..c {
                let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let v00 = pixel(plane, h, w, f.y0, f.x0);
                let v01 = pixel(plane, h, w, f.y0, f.x0 + 1);
                let v10 = pixel(plane, h, w, f.y0 + 1, f.x0);
                let v11 = pixel(plane, h, w, f.y0 + 1, f.x0 + 1);
                let top = v00 * (one - f.wx1) + v01 * f.wx1;
                let bot = v10 * (one - f.wx1) + v11 * f.wx1;
                out[(b * c + ch) * ho * wo + p] = top * (one - f.wy1) + bot * f.wy1;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn grid_sample_backward<T: Float>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    grid: &[T],
    ho: usize,
    wo: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dgrid: Option<&mut [T]>,
) {
    let one = T::one();
    for b in 0..n {
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let Some(f) = footprint(grid[gi], grid[gi + 1], h, w) else {
                continue;
            };
            let corners = [
                (f.y0, f.x0, (one - f.wy1) * (one - f.wx1)),
                (f.y0, f.x0 + 1, (one - f.wy1) * f.wx1),
                (f.y0 + 1, f.x0, f.wy1 * (one - f.wx1)),
                (f.y0 + 1, f.x0 + 1, f.wy1 * f.wx1),
            ];
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for ch in 0..c {
                let plane_off = (b * c + ch) * h * w;
                let go = dy[(b * c + ch) * ho * wo + p];
                if go == T::zero() {
                    continue;
                }
                if let Some(dx) = dx.as_deref_mut() {
                    for &(yy, xx, wt) in &corners {
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            dx[plane_off + yy as usize * w + xx as usize] += go * wt;
                        }
                    }
                }
                if dgrid.is_some() {
                    let plane = &x[plane_off..plane_off + h * w];
                    let v00 = pixel(plane, h, w, f.y0, f.x0);
                    let v01 = pixel(plane, h, w, f.y0, f.x0 + 1);
                    let v10 = pixel(plane, h, w, f.y0 + 1, f.x0);
                    let v11 = pixel(plane, h, w, f.y0 + 1, f.x0 + 1);
                    let dix = (v01 - v00) * (one - f.wy1) + (v11 - v10) * f.wy1;
                    let diy = (v10 - v00) * (one - f.wx1) + (v11 - v01) * f.wx1;
                    gx += go * dix;
                    gy += go * diy;
                }
            }
            if let Some(dg) = dgrid.as_deref_mut() {
                dg[gi] += gx * f.sx;
                dg[gi + 1] += gy * f.sy;
            }
        }
    }
}

/// One pooling region as fractions of the feature map: rows `[y0, y1)`,
/// columns `[x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionBox {
    pub y0: f64,
    pub y1: f64,
    pub x0: f64,
    pub x1: f64,
}

/// The six lung regions in row-major `(row, column)` order: A, D, B, E, C, F.
///
/// Three bands of height `h` with `3h - 2 * 0.25h = 1` (so `h = 0.4`) start
/// at 0, 0.3 and 0.6; two columns split the width in half.
pub fn roi_band_boxes() -> [RegionBox; 6] {
    let h = 1.0 / (3.0 - 2.0 * BAND_OVERLAP);
    let step = h * (1.0 - BAND_OVERLAP);
    let mut out = [RegionBox {
        y0: 0.0,
        y1: 0.0,
        x0: 0.0,
        x1: 0.0,
    }; 6];
    for row in 0..3 {
        for col in 0..2 {
            let y0 = step * row as f64;
            out[row * 2 + col] = RegionBox {
                y0,
                y1: if row == 2 { 1.0 } else { y0 + h },
                x0: 0.5 * col as f64,
                x1: 0.5 * (col + 1) as f64,
            };
        }
    }
    out
}

/// Per output bin: the input indices along one axis and their weights.
type AxisTaps = Vec<Vec<(usize, f64)>>;

/// Separable bilinear taps that average `ceil(bin extent)` evenly spaced
/// samples per bin, clamped to the border.
fn axis_taps(lo: f64, hi: f64, n: usize, bins: usize) -> AxisTaps {
    let start = lo * n as f64;
    let bin = (hi - lo) * n as f64 / bins as f64;
    let samples = bin.ceil().max(1.0) as usize;
    (0..bins)
        .map(|bi| {
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for s in 0..samples {
                let pos = start + (bi as f64 + (s as f64 + 0.5) / samples as f64) * bin - 0.5;
                let pos = pos.clamp(0.0, (n - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                let l = pos - i0 as f64;
                for (idx, wt) in [(i0, 1.0 - l), (i1, l)] {
                    if wt == 0.0 {
                        continue;
                    }
                    let wt = wt / samples as f64;
                    match taps.iter_mut().find(|t| t.0 == idx) {
                        Some(t) => t.1 += wt,
                        None => taps.push((idx, wt)),
                    }
                }
            }
            taps
        })
        .collect()
}

pub(crate) struct RoiTaps {
    rows: Vec<AxisTaps>,
    cols: Vec<AxisTaps>,
}

pub(crate) fn roi_taps(boxes: &[RegionBox], h: usize, w: usize, bins: usize) -> RoiTaps {
    RoiTaps {
        rows: boxes
            .iter()
            .map(|b| axis_taps(b.y0, b.y1, h, bins))
            .collect(),
        cols: boxes
            .iter()
            .map(|b| axis_taps(b.x0, b.x1, w, bins))
            .collect(),
    }
}

/// Output layout: `[n * regions + r, c, bins, bins]`.
pub(crate) fn roi_pool_forward<T: Float>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    taps: &RoiTaps,
    bins: usize,
) -> Vec<T> {
    let regions = taps.rows.len();
    let mut out = vec![T::zero(); n * regions * c * bins * bins];
    for b in 0..n {
        for r in 0..regions {
            for ch in 0..c {
                let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let dst = ((b * regions + r) * c + ch) * bins * bins;
                for (by, rt) in taps.rows[r].iter().enumerate() {
                    for (bx, ct) in taps.cols[r].iter().enumerate() {
                        let mut s = T::zero();
                        for &(yi, wy) in rt {
                            let mut row = T::zero();
                            for &(xi, wx) in ct {
                                row += plane[yi * w + xi] * T::lit(wx);
                            }
                            s += row * T::lit(wy);
                        }
                        out[dst + by * bins + bx] = s;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn roi_pool_backward<T: Float>(
    dy: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    taps: &RoiTaps,
    bins: usize,
    dx: &mut [T],
) {
    let regions = taps.rows.len();
    for b in 0..n {
        for r in 0..regions {
            for ch in 0..c {
                let plane = &mut dx[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let src = ((b * regions + r) * c + ch) * bins * bins;
                for (by, rt) in taps.rows[r].iter().enumerate() {
                    for (bx, ct) in taps.cols[r].iter().enumerate() {
                        let g = dy[src + by * bins + bx];
                        for &(yi, wy) in rt {
                            let gy = g * T::lit(wy);
                            for &(xi, wx) in ct {
                                plane[yi * w + xi] += gy * T::lit(wx);
                            }
                        }
                    }
                }
            }
        }
    }
}
