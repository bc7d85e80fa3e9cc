//! Segmentation, alignment and region-scoring network.
//!
//! A small residual backbone produces four feature levels (strides 2, 4, 8,
//! 16). A nested skip-connection decoder turns them into a lung probability
//! map; a regressor estimates an affine map from that mask; the same map
//! resamples every feature level; six overlapping lung regions are pooled
//! from the aligned levels and scored by a shared pyramid head.

mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::geometry::AffineParams;
use crate::imaging::{GrayImage, ProbMask};
use crate::scoring::{BrixiaScore, CLASSES, REGIONS};
use crate::tensor::{roi_band_boxes, Float, Graph, ParamStore, Tensor, Var};
use layers::{activate, Act, Conv, Dense, ResBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Square input side; a multiple of 16.
    pub input_size: usize,
    /// Backbone channels per level.
    pub widths: [usize; 4],
    pub blocks_per_stage: usize,
    /// Decoder channels at levels 0..=2.
    pub decoder_widths: [usize; 3],
    pub align_hidden: usize,
    pub fpn_width: usize,
    pub roi_bins: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            widths: [8, 16, 32, 64],
            blocks_per_stage: 2,
            decoder_widths: [8, 16, 32],
            align_hidden: 64,
            fpn_width: 32,
            roi_bins: 4,
        }
    }
}

impl NetConfig {
    pub fn with_input_size(size: usize) -> Self {
        Self {
            input_size: size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 16",
                self.input_size
            )));
        }
        let all = self.widths.iter().chain(&self.decoder_widths).chain([
            &self.align_hidden,
            &self.fpn_width,
            &self.roi_bins,
            &self.blocks_per_stage,
        ]);
        if all.into_iter().any(|&v| v == 0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }

    /// Channel widths of the alignment regressor's strided convolutions and
    /// the side of their final map.
    fn align_plan(&self) -> (Vec<usize>, usize) {
        let mut n = self.input_size / 2;
        let mut widths = Vec::new();
        let mut c = 8;
        while n > 4 {
            widths.push(c);
            c = (c * 2).min(64);
            n = n.div_ceil(2);
        }
        (widths, n)
    }
}

/// Whether aligned features are masked by the aligned lung probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    Hard,
    Soft,
}

impl AttentionMode {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Hard => "ha",
            Self::Soft => "sa",
        }
    }
}

/// Source of the affine map used by the feature aligner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignControl {
    Estimated,
    /// Bypasses the regressor (alignment disabled).
    Identity,
}

#[derive(Clone, Debug)]
struct Layers {
    stem: Conv,
    stages: Vec<Vec<ResBlock>>,
    /// `nodes[i][j - 1]` is decoder node `(i, j)`.
    nodes: Vec<Vec<Conv>>,
    seg_full: Conv,
    seg_out: Conv,
    align_convs: Vec<Conv>,
    align_fc1: Dense,
    align_fc2: Dense,
    lateral: Vec<Conv>,
    smooth: Vec<Conv>,
    fuse: Conv,
    cls: Conv,
}

/// Variance floor of the per-region normalization at the head input.
pub const HEAD_NORM_EPS: f64 = 1e-5;

/// Network weights with their layer layout.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

/// Graph outputs of the segmentation branch.
pub struct SegOutput {
    pub features: [Var; 4],
    /// `[N, 1, S, S]` lung probability.
    pub lung: Var,
}

pub struct FullOutput {
    pub features: [Var; 4],
    pub lung: Var,
    pub theta: Var,
    pub aligned: [Var; 4],
    pub aligned_mask: Var,
    /// `[N, 6, 4]` per-region class probabilities.
    pub dist: Var,
    /// Items whose alignment estimate was replaced by the identity.
    pub substituted: Vec<bool>,
}

pub const SEG_PREFIXES: [&str; 2] = ["backbone.", "seg."];
pub const ALIGN_PREFIX: &str = "align.";
pub const HEAD_PREFIX: &str = "head.";

impl Model<f32> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let r = &mut rng;
        let w = config.widths;

        let stem = Conv::new(&mut ps, r, "backbone.stem", 1, w[0], 3, 2, false);
        let mut stages = Vec::new();
        for (i, &c) in w.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage {
                let (cin, stride) = match (i, b) {
                    (0, 0) => (w[0], 1),
                    (_, 0) => (w[i - 1], 2),
                    _ => (c, 1),
                };
                blocks.push(ResBlock::new(
                    &mut ps,
                    r,
                    &format!("backbone.s{i}.b{b}"),
                    cin,
                    c,
                    stride,
                ));
            }
            stages.push(blocks);
        }

        let dw = config.decoder_widths;
        let level_width = |i: usize, j: usize| if j == 0 { w[i] } else { dw[i] };
        let mut nodes = Vec::new();
        for i in 0..3 {
            let mut row = Vec::new();
            for j in 1..=decoder_depth(i) {
                let below = up_source(i, j);
                let cin: usize =
                    (0..j).map(|k| level_width(i, k)).sum::<usize>() + level_width(i + 1, below);
                row.push(Conv::new(
                    &mut ps,
                    r,
                    &format!("seg.x{i}{j}"),
                    cin,
                    dw[i],
                    3,
                    1,
                    false,
                ));
            }
            nodes.push(row);
        }
        let seg_full = Conv::new(&mut ps, r, "seg.full", dw[0] + 1, dw[0], 3, 1, false);
        let seg_out = Conv::new(&mut ps, r, "seg.out", dw[0], 2, 1, 1, true);

        let (aw, side) = config.align_plan();
        let mut align_convs = Vec::new();
        let mut cin = 1;
        for (k, &c) in aw.iter().enumerate() {
            align_convs.push(Conv::new(
                &mut ps,
                r,
                &format!("align.c{k}"),
                cin,
                c,
                3,
                2,
                false,
            ));
            cin = c;
        }
        let align_fc1 = Dense::new(
            &mut ps,
            r,
            "align.fc1",
            cin * side * side,
            config.align_hidden,
        );
        let align_fc2 = Dense::new(&mut ps, r, "align.fc2", config.align_hidden, 6);
        ps.tensor_mut(align_fc2.w).data_mut().fill(0.0);
        ps.tensor_mut(align_fc2.b)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

        let f = config.fpn_width;
        let lateral = (0..4)
            .map(|l| Conv::new(&mut ps, r, &format!("head.lat{l}"), w[l], f, 1, 1, false))
            .collect();
        let smooth = (0..4)
            .map(|l| Conv::new(&mut ps, r, &format!("head.smooth{l}"), f, f, 3, 1, false))
            .collect();
        let fuse = Conv::new(&mut ps, r, "head.fuse", 4 * f, f, 3, 1, false);
        let cls = Conv::new(&mut ps, r, "head.cls", f, CLASSES, 1, 1, false);

        Ok(Self {
            config,
            params: ps,
            layers: Layers {
                stem,
                stages,
                nodes,
                seg_full,
                seg_out,
                align_convs,
                align_fc1,
                align_fc2,
                lateral,
                smooth,
                fuse,
                cls,
            },
        })
    }
}

impl<T: Float> Model<T> {
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Backbone and nested decoder. `x` is `[N, 1, S, S]`.
    pub fn segment(&self, g: &mut Graph<T>, x: Var) -> Result<SegOutput> {
        let s = self.config.input_size;
        match *g.shape(x) {
            [_, 1, h, w] if h == s && w == s => {}
            ref sh => {
                return Err(contract_err!(
                    "network input must be [N, 1, {s}, {s}], got {sh:?}"
                ))
            }
        }
        let (ps, l) = (&self.params, &self.layers);
        let mut h = l.stem.forward_act(g, ps, x, Act::Relu)?;
        let mut feats = Vec::with_capacity(4);
        for stage in &l.stages {
            for block in stage {
                h = block.forward(g, ps, h)?;
            }
            feats.push(h);
        }
        // grid[i][j] = decoder node (i, j); column 0 holds the backbone levels
        let mut grid: Vec<Vec<Var>> = feats.iter().map(|&f| vec![f]).collect();
        for i in (0..3).rev() {
            for j in 1..=decoder_depth(i) {
                let up = g.upsample2(grid[i + 1][up_source(i, j)])?;
                let mut parts = grid[i][..j].to_vec();
                parts.push(up);
                let cat = g.concat(&parts)?;
                let y = l.nodes[i][j - 1].forward_act(g, ps, cat, Act::Relu)?;
                grid[i].push(y);
            }
        }
        let up = g.upsample2(grid[0][decoder_depth(0)])?;
        let cat = g.concat(&[up, x])?;
        let r = l.seg_full.forward_act(g, ps, cat, Act::Relu)?;
        let logits = l.seg_out.forward(g, ps, r)?;
        let probs = g.softmax(logits, 1)?;
        let lung = g.select_channel(probs, 0)?;
        Ok(SegOutput {
            features: [feats[0], feats[1], feats[2], feats[3]],
            lung,
        })
    }

    /// Affine regressor on a `[N, 1, S, S]` mask; returns `[N, 6]`.
    pub fn estimate_theta(&self, g: &mut Graph<T>, mask: Var) -> Result<Var> {
        let (ps, l) = (&self.params, &self.layers);
        let mut h = g.avg_pool(mask, 2)?;
        for c in &l.align_convs {
            h = c.forward_act(g, ps, h, Act::Swish)?;
        }
        let n = g.shape(h)[0];
        let flat = g.value(h).len() / n;
        let h = g.reshape(h, &[n, flat])?;
        let h = l.align_fc1.forward(g, ps, h)?;
        let h = activate(g, h, Act::Swish);
        l.align_fc2.forward(g, ps, h)
    }

    /// Resamples every level (and the mask) with `theta`; under hard
    /// attention each level is multiplied by the aligned mask pooled to the
    /// level's resolution.
    pub fn align(
        &self,
        g: &mut Graph<T>,
        features: &[Var; 4],
        mask: Var,
        theta: Var,
        mode: AttentionMode,
    ) -> Result<([Var; 4], Var)> {
        let s = self.config.input_size;
        let grid = g.affine_grid(theta, s, s)?;
        let aligned_mask = g.grid_sample(mask, grid)?;
        let mut out = [features[0]; 4];
        for (lvl, &f) in features.iter().enumerate() {
            let (h, w) = (g.shape(f)[2], g.shape(f)[3]);
            let grid = g.affine_grid(theta, h, w)?;
            let mut a = g.grid_sample(f, grid)?;
            if mode == AttentionMode::Hard {
                let m = g.avg_pool(aligned_mask, s / h)?;
                a = g.mul_channel(a, m)?;
            }
            out[lvl] = a;
        }
        Ok((out, aligned_mask))
    }

    /// Region pooling plus the shared pyramid head; returns `[N, 6, 4]`.
    pub fn score(&self, g: &mut Graph<T>, aligned: &[Var; 4]) -> Result<Var> {
        let boxes = roi_band_boxes();
        let mut pooled = [aligned[0]; 4];
        for (lvl, &a) in aligned.iter().enumerate() {
            pooled[lvl] = g.roi_pool(a, &boxes, self.config.roi_bins)?;
        }
        self.score_regions(g, &pooled)
    }

    /// The head alone, on region stacks `[N·6, C_l, b, b]` laid out region
    /// by region within each item. Every region goes through the same
    /// weights.
    pub fn score_regions(&self, g: &mut Graph<T>, pooled: &[Var; 4]) -> Result<Var> {
        let (ps, l) = (&self.params, &self.layers);
        let rows = g.shape(pooled[0])[0];
        if rows % REGIONS != 0 {
            return Err(crate::error::contract_err!(
                "score_regions: {rows} rows is not a multiple of {REGIONS}"
            ));
        }
        let n = rows / REGIONS;
        let mut lat = Vec::with_capacity(4);
        for (lvl, &r) in pooled.iter().enumerate() {
            // per-region normalization keeps the head input scale fixed
            let r = g.normalize_items(r, HEAD_NORM_EPS);
            lat.push(l.lateral[lvl].forward(g, ps, r)?);
        }
        // top-down pathway; every level is pooled to the same grid
        for lvl in (0..3).rev() {
            lat[lvl] = g.add(lat[lvl], lat[lvl + 1])?;
        }
        let mut smoothed = Vec::with_capacity(4);
        for (lvl, &p) in lat.iter().enumerate() {
            smoothed.push(l.smooth[lvl].forward_act(g, ps, p, Act::Swish)?);
        }
        let cat = g.concat(&smoothed)?;
        let h = l.fuse.forward_act(g, ps, cat, Act::Swish)?;
        let logits = l.cls.forward(g, ps, h)?;
        let pooled = g.global_avg_pool(logits)?;
        let probs = g.softmax(pooled, 1)?;
        g.reshape(probs, &[n, REGIONS, CLASSES])
    }

    /// Segment, estimate alignment (or use identity), align, score.
    pub fn forward_full(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: AttentionMode,
        control: AlignControl,
    ) -> Result<FullOutput> {
        let seg = self.segment(g, x)?;
        let n = g.shape(x)[0];
        let mut substituted = vec![false; n];
        let theta = match control {
            AlignControl::Estimated => {
                let raw = self.estimate_theta(g, seg.lung)?;
                // degenerate estimates fall back to the identity
                let vals = g.data(raw).to_vec();
                let masses: Vec<f64> = g
                    .data(seg.lung)
                    .chunks(g.value(seg.lung).len() / n)
                    .map(|c| c.iter().map(|v| v.as_f64()).sum())
                    .collect();
                let bad: Vec<bool> = (0..n)
                    .map(|i| theta_rejected(&vals[i * 6..i * 6 + 6], masses[i]))
                    .collect();
                substituted.clone_from(&bad);
                if bad.iter().any(|&b| b) {
                    let mut fixed = vals;
                    for (i, &b) in bad.iter().enumerate() {
                        if b {
                            fixed[i * 6..i * 6 + 6]
                                .copy_from_slice(&crate::tensor::identity_theta::<T>());
                        }
                    }
                    g.input(Tensor::new(&[n, 6], fixed)?)
                } else {
                    raw
                }
            }
            AlignControl::Identity => {
                let id: Vec<T> = (0..n)
                    .flat_map(|_| crate::tensor::identity_theta::<T>())
                    .collect();
                g.input(Tensor::new(&[n, 6], id)?)
            }
        };
        let (aligned, aligned_mask) = self.align(g, &seg.features, seg.lung, theta, mode)?;
        let dist = self.score(g, &aligned)?;
        Ok(FullOutput {
            features: seg.features,
            lung: seg.lung,
            theta,
            aligned,
            aligned_mask,
            dist,
            substituted,
        })
    }
}

/// Intermediate decoder nodes at level `i`; at most two per level.
fn decoder_depth(i: usize) -> usize {
    (3 - i).min(2)
}

/// Column of level `i + 1` feeding node `(i, j)`. The last node of a level
/// takes the deepest node below it so the bottleneck reaches the output.
fn up_source(i: usize, j: usize) -> usize {
    if j == decoder_depth(i) {
        decoder_depth(i + 1).min(3 - i - 1)
    } else {
        j - 1
    }
}

/// Mask mass below which the alignment estimate is not trusted.
const MIN_MASK_MASS: f64 = 1e-3;

fn theta_rejected<T: Float>(theta: &[T], mask_mass: f64) -> bool {
    let p = AffineParams::from_array(std::array::from_fn(|i| theta[i].as_f64()));
    mask_mass < MIN_MASK_MASS || !p.is_usable()
}

/// Per-region class probabilities, storage order (see [`BrixiaScore`]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreDistribution([[f32; CLASSES]; REGIONS]);

impl ScoreDistribution {
    pub fn new(p: [[f32; CLASSES]; REGIONS]) -> Result<Self> {
        for (r, row) in p.iter().enumerate() {
            let s: f32 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-5 {
                return Err(contract_err!(
                    "region {r} probabilities {row:?} are not a distribution"
                ));
            }
        }
        Ok(Self(p))
    }

    pub fn from_flat(v: &[f32]) -> Result<Self> {
        if v.len() != REGIONS * CLASSES {
            return Err(contract_err!(
                "score distribution needs 24 values, got {}",
                v.len()
            ));
        }
        Self::new(std::array::from_fn(|r| {
            std::array::from_fn(|c| v[r * CLASSES + c])
        }))
    }

    pub fn uniform() -> Self {
        Self([[0.25; CLASSES]; REGIONS])
    }

    pub fn region(&self, r: usize) -> [f32; CLASSES] {
        self.0[r]
    }

    pub fn flat(&self) -> Vec<f32> {
        self.0.iter().flatten().copied().collect()
    }
}

/// Elementwise mean of member distributions.
pub fn ensemble(dists: &[ScoreDistribution]) -> Result<ScoreDistribution> {
    if dists.is_empty() {
        return Err(contract_err!("ensemble of zero distributions"));
    }
    if dists.len() == 1 {
        return Ok(dists[0]);
    }
    let k = dists.len() as f32;
    let mut out = [[0.0f32; CLASSES]; REGIONS];
    for d in dists {
        for (o, row) in out.iter_mut().zip(&d.0) {
            o.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    out.iter_mut().flatten().for_each(|v| *v /= k);
    ScoreDistribution::new(out)
}

/// Per-region argmax; ties resolve to the lower class.
pub fn predict_score(dist: &ScoreDistribution) -> BrixiaScore {
    let cells = dist.0.map(|row| {
        let mut best = 0;
        for c in 1..CLASSES {
            if row[c] > row[best] {
                best = c;
            }
        }
        best as u8
    });
    BrixiaScore::new(cells).expect("argmax in range")
}

/// Inference result for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub dist: ScoreDistribution,
    pub mask: ProbMask,
    pub theta: AffineParams,
    /// Whether a degenerate alignment estimate was replaced by the identity.
    pub theta_substituted: bool,
}

impl Model<f32> {
    fn check_input(&self, img: &GrayImage) -> Result<()> {
        let s = self.config.input_size;
        if img.height() != s || img.width() != s {
            return Err(contract_err!(
                "image is {}x{}, model expects {s}x{s}",
                img.height(),
                img.width()
            ));
        }
        Ok(())
    }

    fn batch_tensor(&self, images: &[&GrayImage]) -> Result<Tensor> {
        for im in images {
            self.check_input(im)?;
        }
        GrayImage::stack(images)
    }

    pub fn predict_mask(&self, img: &GrayImage) -> Result<ProbMask> {
        Ok(self.predict_masks(&[img])?.remove(0))
    }

    pub fn predict_masks(&self, images: &[&GrayImage]) -> Result<Vec<ProbMask>> {
        let x = self.batch_tensor(images)?;
        let mut g = Graph::new();
        let x = g.input(x);
        let seg = self.segment(&mut g, x)?;
        let s = self.config.input_size;
        g.data(seg.lung)
            .chunks(s * s)
            .map(|c| GrayImage::new(s, s, c.to_vec()))
            .collect()
    }

    /// Alignment estimate for a mask; degenerate estimates (empty mask,
    /// near-singular or non-finite map) become the identity, flagged `true`.
    pub fn estimate_affine(&self, mask: &ProbMask) -> Result<(AffineParams, bool)> {
        self.check_input(mask)?;
        let mut g = Graph::new();
        let m = g.input(mask.to_tensor());
        let th = self.estimate_theta(&mut g, m)?;
        let vals = g.data(th);
        let mass: f64 = mask.pixels().iter().map(|&v| v as f64).sum();
        if theta_rejected(vals, mass) {
            return Ok((AffineParams::IDENTITY, true));
        }
        Ok((
            AffineParams::from_array(std::array::from_fn(|i| vals[i] as f64)),
            false,
        ))
    }

    pub fn predict(
        &self,
        images: &[&GrayImage],
        mode: AttentionMode,
        control: AlignControl,
    ) -> Result<Vec<Prediction>> {
        let x = self.batch_tensor(images)?;
        let mut g = Graph::new();
        let x = g.input(x);
        let out = self.forward_full(&mut g, x, mode, control)?;
        let s = self.config.input_size;
        let n = images.len();
        let raw = g.data(out.theta).to_vec();
        let mut preds = Vec::with_capacity(n);
        for i in 0..n {
            let dist = ScoreDistribution::from_flat(&g.data(out.dist)[i * 24..(i + 1) * 24])?;
            let mask = GrayImage::new(s, s, g.data(out.lung)[i * s * s..(i + 1) * s * s].to_vec())?;
            let th: [f64; 6] = std::array::from_fn(|k| raw[i * 6 + k] as f64);
            let substituted = out.substituted[i];
            preds.push(Prediction {
                dist,
                mask,
                theta: AffineParams::from_array(th),
                theta_substituted: substituted,
            });
        }
        Ok(preds)
    }
}
