//! 2×3 affine maps in normalized `[-1, 1]` image coordinates.

use serde::{Deserialize, Serialize};

use crate::imaging::GrayImage;
use crate::tensor::{Graph, Tensor};

/// Determinants below this magnitude are treated as singular.
pub const MIN_DET: f64 = 1e-3;

/// Maps an output location `(x, y)` to the sampling location
/// `(a·x + b·y + tx, c·x + d·y + ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub c: f64,
    pub d: f64,
    pub ty: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        c: 0.0,
        d: 1.0,
        ty: 0.0,
    };

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            a: v[0],
            b: v[1],
            tx: v[2],
            c: v[3],
            d: v[4],
            ty: v[5],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a, self.b, self.tx, self.c, self.d, self.ty]
    }

    /// Sampling map of an image rotated by `angle_deg` (counter-clockwise on
    /// screen), zoomed by `scale` and shifted by `(sx, sy)` in normalized
    /// units, all about the image centre.
    pub fn warp(angle_deg: f64, scale: f64, sx: f64, sy: f64) -> Self {
        // forward map p' = s·R·p + t, so sampling uses its inverse
        let fwd = {
            let (c, s) = (angle_deg.to_radians().cos(), angle_deg.to_radians().sin());
            Self {
                a: scale * c,
                b: scale * s,
                tx: sx,
                c: -scale * s,
                d: scale * c,
                ty: sy,
            }
        };
        fwd.inverse().expect("non-zero scale")
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn is_usable(&self) -> bool {
        self.is_finite() && self.det().abs() >= MIN_DET
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.tx,
            self.c * x + self.d * y + self.ty,
        )
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineParams) -> Self {
        Self {
            a: self.a * other.a + self.b * other.c,
            b: self.a * other.b + self.b * other.d,
            tx: self.a * other.tx + self.b * other.ty + self.tx,
            c: self.c * other.a + self.d * other.c,
            d: self.c * other.b + self.d * other.d,
            ty: self.c * other.tx + self.d * other.ty + self.ty,
        }
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        let (a, b, c, d) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Some(Self {
            a,
            b,
            tx: -(a * self.tx + b * self.ty),
            c,
            d,
            ty: -(c * self.tx + d * self.ty),
        })
    }

    /// Resamples `img` through this map with bilinear interpolation;
    /// locations outside the image read zero.
    pub fn warp_image(&self, img: &GrayImage) -> GrayImage {
        let (h, w) = (img.height(), img.width());
        let mut g = Graph::<f32>::new();
        let x = g.input(img.to_tensor());
        let th: Vec<f32> = self.to_array().iter().map(|&v| v as f32).collect();
        let th = g.input(Tensor::new(&[1, 6], th).expect("six values"));
        let grid = g.affine_grid(th, h, w).expect("valid size");
        let y = g.grid_sample(x, grid).expect("matching batch");
        GrayImage::new(h, w, g.data(y).to_vec()).expect("finite")
    }
}
