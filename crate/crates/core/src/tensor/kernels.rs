//! Raw forward/backward kernels on row-major NCHW buffers.

use super::float::{matmul, Float};

/// Output extent of a strided, zero-padded window: `floor((n + 2p - k) / s) + 1`.
pub fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = (g.ho, g.wo);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.ho, g.wo);
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[n] = W · im2col(x[n]) + b`.
pub(crate) fn conv2d_forward<T: Float>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
    out_c: usize,
) -> Vec<T> {
    let in_sz = g.c * g.h * g.w;
    let out_sz = out_c * g.ho * g.wo;
    let mut y = vec![T::zero(); n * out_sz];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    for b in 0..n {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let yb = &mut y[b * out_sz..(b + 1) * out_sz];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        matmul(
            false,
            false,
            out_c,
            g.col_rows(),
            g.col_cols(),
            weight,
            cols,
            T::zero(),
            yb,
        );
        if let Some(bias) = bias {
            let hw = g.ho * g.wo;
            for (o, &bv) in bias.iter().enumerate() {
                yb[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

/// Accumulates gradients of a convolution into whichever of `dx`, `dw`,
/// `db` are requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    out_c: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let in_sz = g.c * g.h * g.w;
    let hw = g.ho * g.wo;
    let out_sz = out_c * hw;
    let rows = g.col_rows();
    let mut col = vec![T::zero(); rows * hw];
    let mut dcol = vec![T::zero(); rows * hw];
    for b in 0..n {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        if let Some(db) = db.as_deref_mut() {
            for o in 0..out_c {
                let s: T = dyb[o * hw..(o + 1) * hw].iter().copied().sum();
                db[o] += s;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            matmul(false, true, out_c, hw, rows, dyb, cols, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                matmul(true, false, rows, out_c, hw, weight, dyb, T::one(), dxb);
            } else {
                matmul(
                    true,
                    false,
                    rows,
                    out_c,
                    hw,
                    weight,
                    dyb,
                    T::zero(),
                    &mut dcol,
                );
                col2im_add(&dcol, g, dxb);
            }
        }
    }
}

/// 2×2 max pooling with stride 2; returns output and flat argmax indices.
pub(crate) fn max_pool2_forward<T: Float>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    // strict comparison: ties resolve to the first element in scan order
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (y, arg)
}

/// Non-overlapping `k×k` average pooling.
pub(crate) fn avg_pool_forward<T: Float>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::lit((k * k) as f64);
    let mut y = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for dy in 0..k {
                    let row = &src[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                    for &v in row {
                        s += v;
                    }
                }
                dst[oy * wo + ox] = s * inv;
            }
        }
    }
    y
}

pub(crate) fn avg_pool_backward<T: Float>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    dx: &mut [T],
) {
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::lit((k * k) as f64);
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = dy[p * ho * wo + oy * wo + ox] * inv;
                for dyy in 0..k {
                    for dxx in 0..k {
                        dx[p * h * w + (oy * k + dyy) * w + ox * k + dxx] += gv;
                    }
                }
            }
        }
    }
}

/// Source index pair and weight for half-pixel ×2 bilinear upsampling.
#[inline]
fn up_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

pub(crate) fn upsample2_forward<T: Float>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let xt: Vec<_> = (0..wo).map(|o| up_taps(o, w)).collect();
    let mut y = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, ly) = up_taps(oy, h);
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in xt.iter().enumerate() {
                let lx = T::lit(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                y[p * ho * wo + oy * wo + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward<T: Float>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    dx: &mut [T],
) {
    let (ho, wo) = (2 * h, 2 * w);
    let xt: Vec<_> = (0..wo).map(|o| up_taps(o, w)).collect();
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, ly) = up_taps(oy, h);
            let ly = T::lit(ly);
            for (ox, &(x0, x1, lx)) in xt.iter().enumerate() {
                let lx = T::lit(lx);
                let gv = dy[p * ho * wo + oy * wo + ox];
                let gt = gv * (T::one() - ly);
                let gb = gv * ly;
                dst[y0 * w + x0] += gt * (T::one() - lx);
                dst[y0 * w + x1] += gt * lx;
                dst[y1 * w + x0] += gb * (T::one() - lx);
                dst[y1 * w + x1] += gb * lx;
            }
        }
    }
}
