//! Procedural chest phantoms with known lung masks and region severities,
//! plus affine misalignment pairs and on-disk dataset generation.
//!
//! Geometry is expressed in unit coordinates (`u` across, `v` down) so the
//! same phantom renders at any resolution. The image-left lung carries
//! regions A, B, C; the image-right lung carries D, E, F.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::geometry::AffineParams;
use crate::imaging::io::{write_pgm, BitDepth};
use crate::imaging::{GrayImage, ProbMask};
use crate::item_seed;
use crate::scoring::{BrixiaScore, REGIONS};

/// Rows of each region's opacity core (fractions of the height). The cores
/// are the parts of the three pooling bands that no neighbouring band
/// overlaps, so an opacity in a core is seen by its own region only.
pub const CORE_ROWS: [(f64, f64); 3] = [(0.0, 0.3), (0.4, 0.6), (0.7, 1.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnatomyJitter {
    /// Maximum displacement of lung centres (unit coordinates).
    pub centre: f64,
    /// Maximum relative change of lung semi-axes.
    pub axes: f64,
    pub min_ribs: usize,
    pub max_ribs: usize,
    /// Maximum displacement of the heart shadow.
    pub heart: f64,
}

impl Default for AnatomyJitter {
    fn default() -> Self {
        Self {
            centre: 0.02,
            axes: 0.08,
            min_ribs: 5,
            max_ribs: 8,
            heart: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub severities: BrixiaScore,
    pub size: usize,
    pub jitter: AnatomyJitter,
    /// Probability of overlaying a synthetic tube and ECG leads.
    pub device_prob: f64,
}

impl PhantomSpec {
    pub fn new(seed: u64, severities: BrixiaScore, size: usize) -> Self {
        Self {
            seed,
            severities,
            size,
            jitter: AnatomyJitter::default(),
            device_prob: 0.2,
        }
    }

    fn validate(&self) -> Result<()> {
        let j = &self.jitter;
        if self.size < 8 {
            return Err(contract_err!(
                "phantom size {} is below 8 pixels",
                self.size
            ));
        }
        if !(0.0..=0.04).contains(&j.centre)
            || !(0.0..=0.1).contains(&j.axes)
            || !(0.0..=0.1).contains(&j.heart)
        {
            return Err(contract_err!(
                "anatomy jitter would push lungs out of frame"
            ));
        }
        if j.min_ribs > j.max_ribs || !(0.0..=1.0).contains(&self.device_prob) {
            return Err(contract_err!("invalid rib range or device probability"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: GrayImage,
    pub lung_mask: ProbMask,
    pub score: BrixiaScore,
}

/// A rendered phantom together with its opacity layer (the intensity added
/// by disease), kept for verifying where opacities were placed.
pub struct Phantom {
    pub record: SampleRecord,
    pub opacity: GrayImage,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cu: f64,
    cv: f64,
    au: f64,
    av: f64,
}

impl Ellipse {
    fn level(&self, u: f64, v: f64) -> f64 {
        ((u - self.cu) / self.au).powi(2) + ((v - self.cv) / self.av).powi(2)
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        self.level(u, v) <= 1.0
    }
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = cells + 2;
        Self {
            cells,
            lattice: (0..n * n).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 2;
        let (x, y) = (
            u.clamp(0.0, 1.0) * self.cells as f64,
            v.clamp(0.0, 1.0) * self.cells as f64,
        );
        let (i, j) = ((x as usize).min(self.cells), (y as usize).min(self.cells));
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (s(x - i as f64), s(y - j as f64));
        let l = |a: usize, b: usize| self.lattice[b * n + a];
        let top = l(i, j) * (1.0 - fx) + l(i + 1, j) * fx;
        let bot = l(i, j + 1) * (1.0 - fx) + l(i + 1, j + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

fn jitter(rng: &mut ChaCha8Rng, m: f64) -> f64 {
    if m > 0.0 {
        rng.random_range(-m..=m)
    } else {
        0.0
    }
}

/// Region storage index (row * 2 + col) of a point at height `v` in lung
/// column `col`, if it lies in a core.
pub fn core_region(v: f64, col: usize) -> Option<usize> {
    CORE_ROWS
        .iter()
        .position(|&(a, b)| v >= a && (v < b || b == 1.0))
        .map(|row| row * 2 + col)
}

/// Renders a phantom. Every random draw comes from `spec.seed`.
pub fn render_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let j = &spec.jitter;
    let s = spec.size;

    let mut lungs = [
        Ellipse {
            cu: 0.28,
            cv: 0.50,
            au: 0.16,
            av: 0.40,
        },
        Ellipse {
            cu: 0.72,
            cv: 0.50,
            au: 0.16,
            av: 0.40,
        },
    ];
    for l in &mut lungs {
        l.cu += jitter(&mut rng, j.centre);
        l.cv += jitter(&mut rng, j.centre);
        l.au *= 1.0 + jitter(&mut rng, j.axes);
        l.av *= 1.0 + jitter(&mut rng, j.axes);
    }
    let torso = Ellipse {
        cu: 0.5,
        cv: 0.56,
        au: 0.49,
        av: 0.56,
    };
    let heart = Ellipse {
        cu: 0.55 + jitter(&mut rng, j.heart),
        cv: 0.72 + jitter(&mut rng, j.heart),
        au: 0.15,
        av: 0.14,
    };
    let n_ribs = rng.random_range(j.min_ribs..=j.max_ribs);
    let rib_phase = rng.random_range(0.0..1.0);
    let coarse = ValueNoise::new(&mut rng, 6);
    let vessels = ValueNoise::new(&mut rng, 14);
    let fine = ValueNoise::new(&mut rng, 40);
    let dense = ValueNoise::new(&mut rng, 5);
    let gamma = 1.0 + jitter(&mut rng, 0.1);

    // Blobs for severity >= 2, kept inside the region's core area.
    let sev = spec.severities.cells();
    let mut blobs: Vec<(usize, f64, f64, f64)> = Vec::new();
    for (r, &sv) in sev.iter().enumerate() {
        if sv < 2 {
            continue;
        }
        let (row, col) = (r / 2, r % 2);
        let l = lungs[col];
        let (v0, v1) = CORE_ROWS[row];
        for _ in 0..rng.random_range(3..=5) {
            // rejection-sample a centre inside lung ∩ core rows
            let (mut bu, mut bv) = (l.cu, (v0 + v1) / 2.0);
            for _ in 0..64 {
                let u = rng.random_range(l.cu - l.au..l.cu + l.au);
                let v = rng.random_range(v0..v1);
                if l.contains(u, v) {
                    (bu, bv) = (u, v);
                    break;
                }
            }
            blobs.push((r, bu, bv, rng.random_range(0.03..0.06)));
        }
    }

    let devices = rng.random_bool(spec.device_prob);
    let tube_u = 0.5 + jitter(&mut rng, 0.03);
    let leads: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.15..0.85), rng.random_range(0.1..0.9)))
        .collect();
    let sensor: Vec<f64> = (0..s * s).map(|_| jitter(&mut rng, 0.01)).collect();

    let mut image = vec![0.0f32; s * s];
    let mut mask = vec![0.0f32; s * s];
    let mut opacity = vec![0.0f32; s * s];
    for y in 0..s {
        let v = (y as f64 + 0.5) / s as f64;
        for x in 0..s {
            let u = (x as f64 + 0.5) / s as f64;
            let p = y * s + x;
            let mut val = 0.05;
            if torso.contains(u, v) {
                val = 0.48 + 0.08 * coarse.at(u, v);
                val += 0.16 * (-((u - 0.5) / 0.05).powi(2)).exp();
            }
            let lung = lungs.iter().position(|l| l.contains(u, v));
            if heart.contains(u, v) && lung.is_none() {
                val += 0.1;
            }
            let mut op = 0.0;
            if let Some(col) = lung {
                mask[p] = 1.0;
                val = 0.16 + 0.06 * coarse.at(u, v) + 0.05 * vessels.at(u, v);
                if let Some(r) = core_region(v, col) {
                    let sv = sev[r];
                    if sv >= 1 {
                        op += 0.12 * fine.at(u, v);
                    }
                    if sv >= 2 {
                        for &(br, bu, bv, rad) in &blobs {
                            if br == r {
                                let d2 = ((u - bu).powi(2) + (v - bv).powi(2)) / (rad * rad);
                                op += 0.22 * (-d2).exp();
                            }
                        }
                    }
                    if sv >= 3 {
                        op += 0.22 * (0.7 + 0.3 * dense.at(u, v));
                    }
                }
            }
            if torso.contains(u, v) {
                for k in 0..n_ribs {
                    let vk = 0.08 + (k as f64 + rib_phase * 0.5) * 0.82 / n_ribs as f64;
                    let centre = vk + 0.12 * (u - 0.5).powi(2);
                    val += 0.06 * (-((v - centre) / 0.018).powi(2)).exp();
                }
            }
            val += op;
            if devices {
                if (u - tube_u).abs() < 0.006 && v < 0.38 {
                    val = 0.95;
                }
                if leads
                    .iter()
                    .any(|&(lu, lv)| (u - lu).powi(2) + (v - lv).powi(2) < 0.015f64.powi(2))
                {
                    val = 0.95;
                }
            }
            val += sensor[p];
            image[p] = (val.clamp(0.0, 1.0).powf(gamma)) as f32;
            opacity[p] = op as f32;
        }
    }
    let record = SampleRecord {
        id: format!("s{:016x}", spec.seed),
        image: GrayImage::new(s, s, image)?,
        lung_mask: GrayImage::new(s, s, mask)?,
        score: spec.severities,
    };
    Ok(Phantom {
        record,
        opacity: GrayImage::new(s, s, opacity)?,
    })
}

pub fn gen_phantom(spec: &PhantomSpec) -> Result<SampleRecord> {
    Ok(render_phantom(spec)?.record)
}

/// Magnitudes of the synthetic misalignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpConfig {
    pub max_rotation_deg: f64,
    pub max_scale: f64,
    /// Fraction of the image size.
    pub max_shift: f64,
    pub p_rotate: f64,
    pub p_scale: f64,
    pub p_shift: f64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 25.0,
            max_scale: 0.10,
            max_shift: 0.10,
            p_rotate: 0.8,
            p_scale: 0.8,
            p_shift: 0.8,
        }
    }
}

impl WarpConfig {
    pub fn zero() -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_scale: 0.0,
            max_shift: 0.0,
            ..Self::default()
        }
    }
}

pub struct MisalignedPair {
    pub warped_image: GrayImage,
    pub warped_mask: ProbMask,
    pub original_mask: ProbMask,
    /// Map that, applied to the warped image, restores the original. For
    /// evaluation only.
    pub realign: AffineParams,
}

fn draw(rng: &mut ChaCha8Rng, p: f64, m: f64) -> f64 {
    if m > 0.0 && rng.random_bool(p) {
        rng.random_range(-m..=m)
    } else {
        0.0
    }
}

pub fn draw_warp(cfg: &WarpConfig, seed: u64) -> AffineParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = draw(&mut rng, cfg.p_rotate, cfg.max_rotation_deg);
    let scale = 1.0 + draw(&mut rng, cfg.p_scale, cfg.max_scale);
    let sx = 2.0 * draw(&mut rng, cfg.p_shift, cfg.max_shift);
    let sy = 2.0 * draw(&mut rng, cfg.p_shift, cfg.max_shift);
    AffineParams::warp(angle, scale, sx, sy)
}

/// Warps image and mask with a random affine map (rotation, zoom, shift).
pub fn gen_misaligned_pair(sample: &SampleRecord, cfg: &WarpConfig, seed: u64) -> MisalignedPair {
    let warp = draw_warp(cfg, seed);
    MisalignedPair {
        warped_image: warp.warp_image(&sample.image),
        warped_mask: warp.warp_image(&sample.lung_mask),
        original_mask: sample.lung_mask.clone(),
        realign: warp.inverse().expect("warp draws are invertible"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    pub image_size: usize,
    pub split: (f64, f64, f64),
    /// Per-image disease level `p ~ Beta(a, b)`; region severities are
    /// `Binomial(3, p)`, which gives a unimodal Global Score histogram.
    pub severity_beta: (f64, f64),
    pub device_prob: f64,
    /// Simulated raters written to `raters.csv`.
    pub raters: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 2500,
            seed: 0,
            image_size: 128,
            split: (0.8, 0.1, 0.1),
            severity_beta: (2.0, 2.0),
            device_prob: 0.2,
            raters: 5,
        }
    }
}

pub fn draw_severities(rng: &mut ChaCha8Rng, beta: (f64, f64)) -> BrixiaScore {
    let p = Beta::new(beta.0, beta.1)
        .expect("positive shape")
        .sample(rng);
    let bin = Binomial::new(3, p.clamp(0.0, 1.0)).expect("p in [0,1]");
    let mut cells = [0u8; REGIONS];
    for c in &mut cells {
        *c = bin.sample(rng) as u8;
    }
    BrixiaScore::new(cells).expect("binomial(3) in range")
}

pub fn sample_id(index: usize) -> String {
    format!("p{index:05}")
}

/// The `index`-th phantom of a dataset.
pub fn dataset_sample(cfg: &DatasetConfig, index: usize) -> Result<SampleRecord> {
    let seed = item_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let severities = draw_severities(&mut rng, cfg.severity_beta);
    let spec = PhantomSpec {
        device_prob: cfg.device_prob,
        ..PhantomSpec::new(rng.random(), severities, cfg.image_size)
    };
    let mut rec = gen_phantom(&spec)?;
    rec.id = sample_id(index);
    Ok(rec)
}

/// Split sizes; rounding leftovers go to the test split.
pub fn split_counts(n: usize, split: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = split;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "split fractions {a},{b},{c} must be in [0,1] and sum to 1"
        )));
    }
    let tr = ((n as f64) * a).round() as usize;
    let va = (((n as f64) * b).round() as usize).min(n - tr.min(n));
    let tr = tr.min(n);
    Ok((tr, va, n - tr - va))
}

/// Noisy ratings of a ground-truth score: rater `k` (seniority `k + 1`)
/// deviates by one grade with a probability growing with `k`.
pub fn simulate_rater(truth: &BrixiaScore, rater: usize, seed: u64) -> BrixiaScore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = 0.15 + 0.05 * rater as f64;
    let cells = truth.cells().map(|v| {
        if rng.random_bool(p) {
            let up = rng.random_bool(0.5);
            match (v, up) {
                (0, _) => 1,
                (3, _) => 2,
                (v, true) => v + 1,
                (v, false) => v - 1,
            }
        } else {
            v
        }
    });
    BrixiaScore::new(cells).expect("stays in range")
}

/// Writes `images/`, `masks/`, `scores.csv`, `raters.csv` and the split
/// lists under `out_dir`.
pub fn gen_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<()> {
    let (tr, va, _) = split_counts(cfg.n, cfg.split)?;
    for sub in ["images", "masks"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut scores = String::from("id,A,B,C,D,E,F\n");
    let mut raters = String::from("id,rater,seniority,A,B,C,D,E,F\n");
    let mut lists = [String::new(), String::new(), String::new()];
    for i in 0..cfg.n {
        let rec = dataset_sample(cfg, i)?;
        write_pgm(
            &out_dir.join("images").join(format!("{}.pgm", rec.id)),
            &rec.image,
            BitDepth::Sixteen,
        )?;
        write_pgm(
            &out_dir.join("masks").join(format!("{}.pgm", rec.id)),
            &rec.lung_mask,
            BitDepth::Eight,
        )?;
        let v = rec.score.abcdef();
        let _ = writeln!(
            scores,
            "{},{},{},{},{},{},{}",
            rec.id, v[0], v[1], v[2], v[3], v[4], v[5]
        );
        for k in 0..cfg.raters {
            let r = simulate_rater(
                &rec.score,
                k,
                item_seed(item_seed(cfg.seed, i as u64), 1 + k as u64),
            )
            .abcdef();
            let _ = writeln!(
                raters,
                "{},R{k},{},{},{},{},{},{},{}",
                rec.id,
                k + 1,
                r[0],
                r[1],
                r[2],
                r[3],
                r[4],
                r[5]
            );
        }
        let which = if i < tr {
            0
        } else if i < tr + va {
            1
        } else {
            2
        };
        let _ = writeln!(lists[which], "{}", rec.id);
    }
    let files = [
        ("scores.csv", scores),
        ("raters.csv", raters),
        ("train.txt", lists[0].clone()),
        ("val.txt", lists[1].clone()),
        ("test.txt", lists[2].clone()),
    ];
    for (name, text) in files {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    let p = out_dir.join("dataset.json");
    fs::write(&p, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&p, e))?;
    Ok(())
}
