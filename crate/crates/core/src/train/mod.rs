//! Staged training: segmentation, alignment, scoring head, then all
//! weights together. Each stage starts from the previous stage's
//! checkpoint and refuses to run without it.

mod checkpoint;
mod data;

pub use checkpoint::{Checkpoint, Manifest, ManifestEntry, BLOB, MANIFEST};
pub use data::{parse_scores_csv, prepare_image, prepare_mask, Dataset, Sample, Split};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::geometry::AffineParams;
use crate::imaging::{augment, overlap_metrics, AugmentConfig, AugmentPolicy, GrayImage, ProbMask};
use crate::item_seed;
use crate::losses::{composite_loss, dice_loss, LossConfig};
use crate::metrics::region_mae;
use crate::network::{
    predict_score, AlignControl, AttentionMode, Model, NetConfig, ScoreDistribution, ALIGN_PREFIX,
    HEAD_PREFIX, SEG_PREFIXES,
};
use crate::scoring::BrixiaScore;
use crate::synth::{draw_warp, WarpConfig};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "seg")]
    Segmentation,
    #[serde(rename = "align")]
    Alignment,
    #[serde(rename = "score")]
    Scoring,
    #[serde(rename = "finetune")]
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Self::Segmentation,
        Self::Alignment,
        Self::Scoring,
        Self::Finetune,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Segmentation => "seg",
            Self::Alignment => "align",
            Self::Scoring => "score",
            Self::Finetune => "finetune",
        }
    }

    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Self::Segmentation => None,
            Self::Alignment => Some(Self::Segmentation),
            Self::Scoring => Some(Self::Alignment),
            Self::Finetune => Some(Self::Scoring),
        }
    }

    fn trainable(self) -> Vec<&'static str> {
        match self {
            Self::Segmentation => SEG_PREFIXES.to_vec(),
            Self::Alignment => vec![ALIGN_PREFIX],
            Self::Scoring => vec![HEAD_PREFIX],
            Self::Finetune => vec![""],
        }
    }

    /// Whether a larger validation metric is better.
    fn maximizes(self) -> bool {
        matches!(self, Self::Segmentation | Self::Alignment)
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}` (seg|align|score|finetune)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Multiplies `base_lr`.
    pub lr_scale: f64,
    /// Epochs without a validation improvement of at least
    /// [`PLATEAU_MIN_DELTA`] before the learning rate is multiplied by
    /// `lr_halving`.
    pub plateau_patience: usize,
    pub lr_halving: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub input_size: usize,
    pub attention: AttentionMode,
    pub augment: AugmentPolicy,
    pub warp: WarpConfig,
    /// Training items drawn per epoch; all of them when `None`.
    pub items_per_epoch: Option<usize>,
}

pub const PLATEAU_MIN_DELTA: f64 = 1e-4;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Segmentation,
            epochs: 40,
            batch_size: 8,
            base_lr: 3e-2,
            lr_scale: 0.1,
            plateau_patience: 5,
            lr_halving: 0.5,
            seed: 0,
            loss: LossConfig::default(),
            input_size: 128,
            attention: AttentionMode::Hard,
            augment: AugmentPolicy::All,
            warp: WarpConfig::default(),
            items_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.base_lr * self.lr_scale
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let pos = [self.base_lr, self.lr_scale, self.lr_halving];
        if self.batch_size == 0
            || self.plateau_patience == 0
            || pos.iter().any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(Error::Config(
                "batch size, patience, learning rate and halving factor must be positive".into(),
            ));
        }
        if self.lr_halving > 1.0 {
            return Err(Error::Config(format!(
                "halving factor {} exceeds 1",
                self.lr_halving
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Dice (segmentation), realigned IoU (alignment) or region MAE.
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Validation metric of the incoming weights.
    pub initial_val: f64,
    pub best_val: f64,
    /// 0 when no epoch beat the incoming weights.
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

impl StageReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_metric,lr\n");
        s.push_str(&format!("0,,{},\n", self.initial_val));
        for e in &self.history {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_metric, e.lr
            ));
        }
        s
    }
}

pub struct StageResult {
    /// Best validation checkpoint.
    pub best: Checkpoint,
    /// Weights after the last epoch.
    pub last: Checkpoint,
    pub report: StageReport,
}

/// Bytes of every frozen parameter, for verifying the freeze contract.
fn frozen_snapshot(model: &Model) -> Vec<(String, Vec<u32>)> {
    let ps = &model.params;
    ps.ids()
        .filter(|&id| ps.is_frozen(id))
        .map(|id| {
            (
                ps.name(id).to_string(),
                ps.tensor(id).data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

fn set_trainable(model: &mut Model, stage: Stage) {
    model.params.set_frozen_prefix("", true);
    for p in stage.trainable() {
        model.params.set_frozen_prefix(p, false);
    }
}

/// Mini-batch Adam loop with plateau halving, keeping the best and last
/// weights. The validation metric of the incoming weights is the baseline
/// the best checkpoint has to beat.
fn fit(
    model: &mut Model,
    cfg: &TrainConfig,
    n_items: usize,
    mut loss_fn: impl FnMut(&Model, &mut Graph<f32>, &[usize], u64) -> Result<Var>,
    mut val_fn: impl FnMut(&Model) -> Result<f64>,
) -> Result<(Model, StageReport)> {
    cfg.validate()?;
    if n_items == 0 {
        return Err(contract_err!(
            "{} stage: empty training set",
            cfg.stage.tag()
        ));
    }
    set_trainable(model, cfg.stage);
    let frozen = frozen_snapshot(model);
    let sign = if cfg.stage.maximizes() { -1.0 } else { 1.0 };

    let initial_val = val_fn(model)?;
    let mut best = (sign * initial_val, model.clone(), 0usize);
    let mut plateau_ref = sign * initial_val;
    let mut stale = 0;
    let mut opt = Adam::init(
        &model.params,
        AdamConfig {
            lr: cfg.lr(),
            ..AdamConfig::default()
        },
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n_items).collect();
    for epoch in 1..=cfg.epochs {
        let epoch_seed = item_seed(cfg.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let take = cfg.items_per_epoch.unwrap_or(n_items).min(n_items);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for batch in order[..take].chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let loss = loss_fn(model, &mut g, batch, epoch_seed)?;
            let lv = g.data(loss)[0] as f64;
            if !lv.is_finite() {
                return Err(contract_err!(
                    "{} stage: loss became {lv} at epoch {epoch}",
                    cfg.stage.tag()
                ));
            }
            let grads = g.backward(loss)?;
            model.params.zero_grads();
            model.params.accumulate(&g, &grads);
            Adam::step(&mut model.params, &mut opt)?;
            loss_sum += lv;
            batches += 1;
        }
        model.params.zero_grads();
        if frozen_snapshot(model) != frozen {
            return Err(contract_err!(
                "{} stage modified frozen weights",
                cfg.stage.tag()
            ));
        }
        let val = val_fn(model)?;
        history.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_metric: val,
            lr: opt.lr(),
        });
        let obj = sign * val;
        if obj < best.0 {
            best = (obj, model.clone(), epoch);
        }
        if obj <= plateau_ref - PLATEAU_MIN_DELTA {
            plateau_ref = obj;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                opt.set_lr(opt.lr() * cfg.lr_halving);
                stale = 0;
            }
        }
    }
    let report = StageReport {
        stage: cfg.stage,
        initial_val,
        best_val: sign * best.0,
        best_epoch: best.2,
        history,
    };
    Ok((best.1, report))
}

fn require(prev: &Checkpoint, stage: Stage) -> Result<()> {
    if let Some(p) = stage.prerequisite() {
        if !prev.has_stage(p) {
            return Err(Error::Missing(format!(
                "the {} stage needs a checkpoint that completed `{}`",
                stage.tag(),
                p.tag()
            )));
        }
    }
    Ok(())
}

fn check_size(model: &Model, cfg: &TrainConfig, data: &[Sample]) -> Result<()> {
    let s = model.config.input_size;
    if cfg.input_size != s {
        return Err(Error::Config(format!(
            "config input size {} vs network {s}",
            cfg.input_size
        )));
    }
    if let Some(bad) = data
        .iter()
        .find(|d| d.image.height() != s || d.image.width() != s)
    {
        return Err(contract_err!("sample {} is not {s}x{s}", bad.id));
    }
    Ok(())
}

fn finish(
    prev: &Checkpoint,
    stage: Stage,
    cfg: &TrainConfig,
    best: Model,
    last: Model,
    report: StageReport,
) -> StageResult {
    let mut stages: Vec<Stage> = prev
        .stages
        .iter()
        .copied()
        .filter(|&s| s != stage)
        .collect();
    stages.push(stage);
    let attention = if matches!(stage, Stage::Scoring | Stage::Finetune) {
        Some(cfg.attention)
    } else {
        prev.attention
    };
    let config = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
    let make = |model: Model| Checkpoint {
        model,
        stages: stages.clone(),
        attention,
        config: config.clone(),
    };
    StageResult {
        best: make(best),
        last: make(last),
        report,
    }
}

fn stack(images: &[&GrayImage]) -> Result<Tensor> {
    GrayImage::stack(images)
}

/// A fresh network for the first stage.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    Ok(Checkpoint::new(Model::new(
        NetConfig::with_input_size(cfg.input_size),
        cfg.seed,
    )?))
}

/// Mean Dice and IoU of thresholded predicted masks.
pub fn segmentation_scores(model: &Model, samples: &[Sample], batch: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(contract_err!("segmentation scores of an empty set"));
    }
    let (mut d, mut i) = (0.0, 0.0);
    for chunk in samples.chunks(batch.max(1)) {
        let imgs: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
        for (m, s) in model.predict_masks(&imgs)?.iter().zip(chunk) {
            let (dd, ii) = overlap_metrics(m, &s.mask)?;
            d += dd;
            i += ii;
        }
    }
    let n = samples.len() as f64;
    Ok((d / n, i / n))
}

pub fn train_segmentation(
    prev: &Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<StageResult> {
    let cfg = &TrainConfig {
        stage: Stage::Segmentation,
        ..cfg.clone()
    };
    check_size(&prev.model, cfg, &data.train)?;
    if data.val.is_empty() {
        return Err(contract_err!("segmentation stage: empty validation set"));
    }
    let aug = AugmentConfig::for_policy(cfg.augment);
    let mut model = prev.model.clone();
    let train = &data.train;
    let (best, report) = fit(
        &mut model,
        cfg,
        train.len(),
        |m, g, batch, epoch_seed| {
            let mut imgs = Vec::with_capacity(batch.len());
            let mut masks = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train[i];
                let a = augment(
                    &s.image,
                    Some(&s.mask),
                    None,
                    &aug,
                    item_seed(epoch_seed, i as u64),
                )?;
                imgs.push(a.image);
                masks.push(a.mask.expect("mask passed in").threshold(0.5));
            }
            let x = g.input(stack(&imgs.iter().collect::<Vec<_>>())?);
            let target = stack(&masks.iter().collect::<Vec<_>>())?;
            let seg = m.segment(g, x)?;
            dice_loss(g, seg.lung, &target)
        },
        |m| Ok(segmentation_scores(m, &data.val, cfg.batch_size)?.0),
    )?;
    Ok(finish(prev, Stage::Segmentation, cfg, best, model, report))
}

/// A warped image and the mask of the unwarped original.
#[derive(Clone, Debug)]
pub struct AlignPair {
    pub warped_image: GrayImage,
    pub original_mask: ProbMask,
    /// Map undoing the warp; evaluation only.
    pub realign: AffineParams,
}

pub fn alignment_pairs(samples: &[Sample], warp: &WarpConfig, seed: u64) -> Vec<AlignPair> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let w = draw_warp(warp, item_seed(seed, i as u64));
            AlignPair {
                warped_image: w.warp_image(&s.image),
                original_mask: s.mask.clone(),
                realign: w.inverse().expect("warp draws are invertible"),
            }
        })
        .collect()
}

/// Predicted masks of the warped images.
fn pair_masks(model: &Model, pairs: &[AlignPair], batch: usize) -> Result<Vec<ProbMask>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch.max(1)) {
        let imgs: Vec<&GrayImage> = chunk.iter().map(|p| &p.warped_image).collect();
        out.extend(model.predict_masks(&imgs)?);
    }
    Ok(out)
}

/// Mean IoU between the original masks and the predicted masks of the
/// warped images resampled with the estimated alignment.
pub fn alignment_iou(model: &Model, pairs: &[AlignPair], batch: usize) -> Result<f64> {
    let masks = pair_masks(model, pairs, batch)?;
    realigned_iou(model, &masks, pairs)
}

fn realigned_iou(model: &Model, masks: &[ProbMask], pairs: &[AlignPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(contract_err!("alignment IoU of an empty set"));
    }
    let mut total = 0.0;
    for (m, p) in masks.iter().zip(pairs) {
        let (theta, _) = model.estimate_affine(m)?;
        let realigned = theta.warp_image(m);
        total += overlap_metrics(&realigned, &p.original_mask)?.1;
    }
    Ok(total / pairs.len() as f64)
}

pub fn train_alignment(
    prev: &Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<StageResult> {
    let cfg = &TrainConfig {
        stage: Stage::Alignment,
        ..cfg.clone()
    };
    require(prev, cfg.stage)?;
    check_size(&prev.model, cfg, &data.train)?;
    let s = prev.model.config.input_size;
    let train_pairs = alignment_pairs(&data.train, &cfg.warp, item_seed(cfg.seed, 0xA1));
    let val_pairs = alignment_pairs(&data.val, &cfg.warp, item_seed(cfg.seed, 0xA2));
    // segmentation is frozen, so its masks are computed once
    let train_masks = pair_masks(&prev.model, &train_pairs, cfg.batch_size)?;
    let val_masks = pair_masks(&prev.model, &val_pairs, cfg.batch_size)?;
    let mut model = prev.model.clone();
    let (best, report) = fit(
        &mut model,
        cfg,
        train_pairs.len(),
        |m, g, batch, _| {
            let masks: Vec<&GrayImage> = batch.iter().map(|&i| &train_masks[i]).collect();
            let targets: Vec<&GrayImage> = batch
                .iter()
                .map(|&i| &train_pairs[i].original_mask)
                .collect();
            let x = g.input(stack(&masks)?);
            let theta = m.estimate_theta(g, x)?;
            let grid = g.affine_grid(theta, s, s)?;
            let realigned = g.grid_sample(x, grid)?;
            dice_loss(g, realigned, &stack(&targets)?)
        },
        |m| realigned_iou(m, &val_masks, &val_pairs),
    )?;
    Ok(finish(prev, Stage::Alignment, cfg, best, model, report))
}

/// Score distributions for `images`, in batches.
pub fn predict_distributions(
    model: &Model,
    images: &[&GrayImage],
    mode: AttentionMode,
    control: AlignControl,
    batch: usize,
) -> Result<Vec<ScoreDistribution>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        out.extend(
            model
                .predict(chunk, mode, control)?
                .into_iter()
                .map(|p| p.dist),
        );
    }
    Ok(out)
}

pub fn validation_mae(
    model: &Model,
    samples: &[Sample],
    mode: AttentionMode,
    batch: usize,
) -> Result<f64> {
    let imgs: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
    let preds: Vec<BrixiaScore> =
        predict_distributions(model, &imgs, mode, AlignControl::Estimated, batch)?
            .iter()
            .map(predict_score)
            .collect();
    let refs: Vec<BrixiaScore> = samples.iter().map(|s| s.score).collect();
    region_mae(&preds, &refs)
}

fn train_score_stage(
    prev: &Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<StageResult> {
    let cfg = &TrainConfig {
        stage,
        ..cfg.clone()
    };
    require(prev, stage)?;
    check_size(&prev.model, cfg, &data.train)?;
    if data.val.is_empty() {
        return Err(contract_err!("{} stage: empty validation set", stage.tag()));
    }
    if stage == Stage::Finetune && prev.attention.is_some_and(|a| a != cfg.attention) {
        return Err(Error::Config(format!(
            "fine-tuning in {} mode from a checkpoint trained in {} mode",
            cfg.attention.tag(),
            prev.attention.map_or("?", |a| a.tag())
        )));
    }
    let aug = AugmentConfig::for_policy(cfg.augment);
    let mut model = prev.model.clone();
    let train = &data.train;
    let (best, report) = fit(
        &mut model,
        cfg,
        train.len(),
        |m, g, batch, epoch_seed| {
            let mut imgs = Vec::with_capacity(batch.len());
            let mut scores = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train[i];
                let a = augment(
                    &s.image,
                    None,
                    Some(&s.score),
                    &aug,
                    item_seed(epoch_seed, i as u64),
                )?;
                imgs.push(a.image);
                scores.push(a.score.expect("score passed in"));
            }
            let x = g.input(stack(&imgs.iter().collect::<Vec<_>>())?);
            let out = m.forward_full(g, x, cfg.attention, AlignControl::Estimated)?;
            composite_loss(g, out.dist, &scores, &cfg.loss)
        },
        |m| validation_mae(m, &data.val, cfg.attention, cfg.batch_size),
    )?;
    Ok(finish(prev, stage, cfg, best, model, report))
}

pub fn train_scoring(prev: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<StageResult> {
    train_score_stage(prev, data, cfg, Stage::Scoring)
}

pub fn finetune_all(prev: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<StageResult> {
    train_score_stage(prev, data, cfg, Stage::Finetune)
}

/// Runs `cfg.stage` on top of `prev`.
pub fn train_stage(prev: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<StageResult> {
    match cfg.stage {
        Stage::Segmentation => train_segmentation(prev, data, cfg),
        Stage::Alignment => train_alignment(prev, data, cfg),
        Stage::Scoring => train_scoring(prev, data, cfg),
        Stage::Finetune => finetune_all(prev, data, cfg),
    }
}
