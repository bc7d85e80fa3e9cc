//! Full staged pipeline, evaluation reports, the rotation sweep and the
//! augmentation ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::geometry::AffineParams;
use crate::imaging::io::write_png_rgb;
use crate::imaging::{AugmentPolicy, GrayImage};
use crate::metrics::{confusion_csv, global_confusion, region_confusion, region_mae, stats_csv};
use crate::network::{
    ensemble, predict_score, AlignControl, AttentionMode, Model, ScoreDistribution,
};
use crate::scoring::BrixiaScore;
use crate::train::{
    finetune_all, initial_checkpoint, predict_distributions, train_alignment, train_scoring,
    train_segmentation, Checkpoint, Dataset, Sample, StageResult, TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEpochs {
    pub seg: usize,
    pub align: usize,
    pub score: usize,
    pub finetune: usize,
}

impl StageEpochs {
    pub fn uniform(n: usize) -> Self {
        Self {
            seg: n,
            align: n,
            score: n,
            finetune: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Shared settings; `stage`, `epochs` and `attention` are set per stage.
    pub train: TrainConfig,
    pub epochs: StageEpochs,
    pub modes: Vec<AttentionMode>,
}

pub struct ModeRun {
    pub mode: AttentionMode,
    pub scoring: StageResult,
    pub finetune: StageResult,
}

pub struct PipelineRun {
    pub segmentation: StageResult,
    pub alignment: StageResult,
    pub modes: Vec<ModeRun>,
}

/// Trains segmentation, alignment, then scoring and fine-tuning for each
/// attention mode, every stage starting from the previous stage's best
/// checkpoint.
pub fn run_pipeline(
    data: &Dataset,
    cfg: &PipelineConfig,
    mut log: impl FnMut(&str),
) -> Result<PipelineRun> {
    let base = &cfg.train;
    let with = |epochs: usize| TrainConfig {
        epochs,
        ..base.clone()
    };
    let init = initial_checkpoint(base)?;
    let segmentation = train_segmentation(&init, data, &with(cfg.epochs.seg))?;
    log(&format!(
        "seg: best val Dice {:.4}",
        segmentation.report.best_val
    ));
    let alignment = train_alignment(&segmentation.best, data, &with(cfg.epochs.align))?;
    log(&format!(
        "align: best val IoU {:.4}",
        alignment.report.best_val
    ));
    let mut modes = Vec::new();
    for &mode in &cfg.modes {
        let c = TrainConfig {
            attention: mode,
            ..with(cfg.epochs.score)
        };
        let scoring = train_scoring(&alignment.best, data, &c)?;
        log(&format!(
            "{} score: best val MAE {:.4}",
            mode.tag(),
            scoring.report.best_val
        ));
        let c = TrainConfig {
            attention: mode,
            ..with(cfg.epochs.finetune)
        };
        let finetune = finetune_all(&scoring.best, data, &c)?;
        log(&format!(
            "{} finetune: best val MAE {:.4}",
            mode.tag(),
            finetune.report.best_val
        ));
        modes.push(ModeRun {
            mode,
            scoring,
            finetune,
        });
    }
    Ok(PipelineRun {
        segmentation,
        alignment,
        modes,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_stage(r: &StageResult, dir: &Path) -> Result<()> {
    r.best.save(&dir.join("best"))?;
    r.last.save(&dir.join("last"))?;
    write(&dir.join("history.csv"), &r.report.to_csv())
}

impl PipelineRun {
    /// `seg/`, `align/`, `<mode>/score/`, `<mode>/finetune/`, each with
    /// `best/`, `last/` and `history.csv`.
    pub fn save(&self, out: &Path) -> Result<()> {
        save_stage(&self.segmentation, &out.join("seg"))?;
        save_stage(&self.alignment, &out.join("align"))?;
        for m in &self.modes {
            save_stage(&m.scoring, &out.join(m.mode.tag()).join("score"))?;
            save_stage(&m.finetune, &out.join(m.mode.tag()).join("finetune"))?;
        }
        Ok(())
    }

    pub fn mode(&self, mode: AttentionMode) -> Option<&ModeRun> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Best and last fine-tuned models of `mode`.
    pub fn members(&self, mode: AttentionMode) -> Vec<&Model> {
        self.mode(mode)
            .map(|m| vec![&m.finetune.best.model, &m.finetune.last.model])
            .unwrap_or_default()
    }
}

/// A model with the attention mode it was trained in.
#[derive(Clone, Copy)]
pub struct Member<'a> {
    pub model: &'a Model,
    pub mode: AttentionMode,
}

/// Averaged distributions of all `members`.
pub fn predict_members(
    members: &[Member],
    images: &[&GrayImage],
    control: AlignControl,
    batch: usize,
) -> Result<Vec<ScoreDistribution>> {
    if members.is_empty() {
        return Err(contract_err!("prediction needs at least one model"));
    }
    let per: Vec<Vec<ScoreDistribution>> = members
        .iter()
        .map(|m| predict_distributions(m.model, images, m.mode, control, batch))
        .collect::<Result<_>>()?;
    (0..images.len())
        .map(|i| ensemble(&per.iter().map(|p| p[i]).collect::<Vec<_>>()))
        .collect()
}

pub struct Evaluation {
    /// `ha`, `sa` or `ens`.
    pub tag: String,
    pub preds: Vec<BrixiaScore>,
    pub mae: f64,
    pub stats_csv: String,
    pub region_confusion_csv: String,
    pub global_confusion_csv: String,
}

pub fn evaluation_of(
    tag: &str,
    preds: Vec<BrixiaScore>,
    refs: &[BrixiaScore],
) -> Result<Evaluation> {
    Ok(Evaluation {
        tag: tag.to_string(),
        mae: region_mae(&preds, refs)?,
        stats_csv: stats_csv(&preds, refs)?,
        region_confusion_csv: confusion_csv(&region_confusion(&preds, refs)?),
        global_confusion_csv: confusion_csv(&global_confusion(&preds, refs)?),
        preds,
    })
}

/// HA and SA rows use the first model of each list (the best checkpoint);
/// the ENS row averages every model of both lists and is produced only when
/// both are given.
pub fn evaluate(
    ha: &[&Model],
    sa: &[&Model],
    samples: &[Sample],
    batch: usize,
) -> Result<Vec<Evaluation>> {
    if ha.is_empty() && sa.is_empty() {
        return Err(Error::Missing("no model checkpoints to evaluate".into()));
    }
    let images: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
    let refs: Vec<BrixiaScore> = samples.iter().map(|s| s.score).collect();
    let mut out = Vec::new();
    let mut all = Vec::new();
    for (models, mode) in [(ha, AttentionMode::Hard), (sa, AttentionMode::Soft)] {
        if let Some(&first) = models.first() {
            let d = predict_members(
                &[Member { model: first, mode }],
                &images,
                AlignControl::Estimated,
                batch,
            )?;
            out.push(evaluation_of(
                mode.tag(),
                d.iter().map(predict_score).collect(),
                &refs,
            )?);
        }
        all.extend(models.iter().map(|&model| Member { model, mode }));
    }
    if !ha.is_empty() && !sa.is_empty() {
        let d = predict_members(&all, &images, AlignControl::Estimated, batch)?;
        out.push(evaluation_of(
            "ens",
            d.iter().map(predict_score).collect(),
            &refs,
        )?);
    }
    Ok(out)
}

/// `stats_<tag>.csv`, `confusion_regions_<tag>.csv`, `confusion_global_<tag>.csv`.
pub fn write_evaluations(evals: &[Evaluation], out: &Path) -> Result<()> {
    for e in evals {
        write(&out.join(format!("stats_{}.csv", e.tag)), &e.stats_csv)?;
        write(
            &out.join(format!("confusion_regions_{}.csv", e.tag)),
            &e.region_confusion_csv,
        )?;
        write(
            &out.join(format!("confusion_global_{}.csv", e.tag)),
            &e.global_confusion_csv,
        )?;
    }
    Ok(())
}

/// `id,A,B,C,D,E,F,global`.
pub fn predictions_csv(ids: &[&str], preds: &[BrixiaScore]) -> String {
    let mut s = String::from("id,A,B,C,D,E,F,global\n");
    for (id, p) in ids.iter().zip(preds) {
        let v = p.abcdef();
        let _ = writeln!(
            s,
            "{id},{},{},{},{},{},{},{}",
            v[0],
            v[1],
            v[2],
            v[3],
            v[4],
            v[5],
            crate::scoring::global_score(p)
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub angle: f64,
    pub mae_with: f64,
    pub mae_without: f64,
}

/// -30° to 30° in 5° steps.
pub fn sweep_angles() -> Vec<f64> {
    (-6..=6).map(|k| 5.0 * k as f64).collect()
}

/// Rotates every image by each angle about its centre and compares region
/// MAE with the estimated alignment against the identity.
pub fn rotation_sweep(
    members: &[Member],
    samples: &[Sample],
    angles: &[f64],
    batch: usize,
) -> Result<Vec<SweepRow>> {
    let refs: Vec<BrixiaScore> = samples.iter().map(|s| s.score).collect();
    let mut rows = Vec::with_capacity(angles.len());
    for &angle in angles {
        let rot = AffineParams::warp(angle, 1.0, 0.0, 0.0);
        let rotated: Vec<GrayImage> = samples.iter().map(|s| rot.warp_image(&s.image)).collect();
        let imgs: Vec<&GrayImage> = rotated.iter().collect();
        let mut mae = [0.0; 2];
        for (k, control) in [AlignControl::Estimated, AlignControl::Identity]
            .into_iter()
            .enumerate()
        {
            let d = predict_members(members, &imgs, control, batch)?;
            mae[k] = region_mae(&d.iter().map(predict_score).collect::<Vec<_>>(), &refs)?;
        }
        rows.push(SweepRow {
            angle,
            mae_with: mae[0],
            mae_without: mae[1],
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("angle,mae_with,mae_without\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.angle, r.mae_with, r.mae_without);
    }
    s
}

/// Relative reduction of the mean MAE over `|angle| <= max_abs` brought
/// by the alignment.
pub fn sweep_improvement(rows: &[SweepRow], max_abs: f64) -> Option<f64> {
    let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.angle.abs() <= max_abs).collect();
    if sel.is_empty() {
        return None;
    }
    let with: f64 = sel.iter().map(|r| r.mae_with).sum();
    let without: f64 = sel.iter().map(|r| r.mae_without).sum();
    (without > 0.0).then(|| 1.0 - with / without)
}

/// Line plot of both curves (blue: with alignment, red: without) on a
/// white canvas.
pub fn render_sweep_plot(rows: &[SweepRow], path: &Path) -> Result<()> {
    const W: usize = 400;
    const H: usize = 240;
    const M: usize = 24;
    let mut rgb = vec![255u8; W * H * 3];
    if rows.is_empty() {
        return write_png_rgb(path, W, H, &rgb);
    }
    let (amin, amax) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
            (a.min(r.angle), b.max(r.angle))
        });
    let ymax = rows
        .iter()
        .map(|r| r.mae_with.max(r.mae_without))
        .fold(0.0, f64::max)
        .max(1e-6);
    let px = |a: f64| M as f64 + (a - amin) / (amax - amin).max(1e-9) * (W - 2 * M) as f64;
    let py = |v: f64| (H - M) as f64 - v / ymax * (H - 2 * M) as f64;
    let mut line = |x0: f64, y0: f64, x1: f64, y1: f64, c: [u8; 3]| {
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for k in 0..=n {
            let t = k as f64 / n as f64;
            let (x, y) = (
                (x0 + t * (x1 - x0)).round() as usize,
                (y0 + t * (y1 - y0)).round() as usize,
            );
            if x < W && y < H {
                rgb[(y * W + x) * 3..(y * W + x) * 3 + 3].copy_from_slice(&c);
            }
        }
    };
    let axis = [0, 0, 0];
    line(
        M as f64,
        (H - M) as f64,
        (W - M) as f64,
        (H - M) as f64,
        axis,
    );
    line(M as f64, M as f64, M as f64, (H - M) as f64, axis);
    for pair in rows.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        line(
            px(a.angle),
            py(a.mae_with),
            px(b.angle),
            py(b.mae_with),
            [0, 70, 200],
        );
        line(
            px(a.angle),
            py(a.mae_without),
            px(b.angle),
            py(b.mae_without),
            [210, 30, 30],
        );
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_png_rgb(path, W, H, &rgb)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub policy: AugmentPolicy,
    pub preprocessing: bool,
    pub train_mae: f64,
    pub val_mae: f64,
}

impl AblationRow {
    pub fn gap(&self) -> f64 {
        (self.val_mae - self.train_mae).abs()
    }
}

/// Retrains scoring and fine-tuning from `base` (a checkpoint that
/// completed alignment) under each augmentation policy with preprocessing,
/// then under the full policy without it. `raw` is the same dataset
/// prepared without preprocessing. Train MAE is measured on the first
/// `train_eval` unaugmented training samples.
pub fn ablate_augment(
    base: &Checkpoint,
    data: &Dataset,
    raw: &Dataset,
    cfg: &TrainConfig,
    epochs: (usize, usize),
    train_eval: usize,
) -> Result<Vec<AblationRow>> {
    let runs = [
        (AugmentPolicy::None, true),
        (AugmentPolicy::Photometric, true),
        (AugmentPolicy::Geometric, true),
        (AugmentPolicy::All, true),
        (AugmentPolicy::All, false),
    ];
    let mut rows = Vec::new();
    for (policy, pre) in runs {
        let ds = if pre { data } else { raw };
        let c = TrainConfig {
            augment: policy,
            epochs: epochs.0,
            ..cfg.clone()
        };
        let s = train_scoring(base, ds, &c)?;
        let f = finetune_all(
            &s.best,
            ds,
            &TrainConfig {
                epochs: epochs.1,
                ..c
            },
        )?;
        let model = &f.best.model;
        let sub = &ds.train[..train_eval.min(ds.train.len())];
        rows.push(AblationRow {
            policy,
            preprocessing: pre,
            train_mae: crate::train::validation_mae(model, sub, cfg.attention, cfg.batch_size)?,
            val_mae: crate::train::validation_mae(model, &ds.val, cfg.attention, cfg.batch_size)?,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("policy,preprocessing,train_mae,val_mae,gap\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6}",
            r.policy.name(),
            if r.preprocessing { "yes" } else { "no" },
            r.train_mae,
            r.val_mae,
            r.gap()
        );
    }
    s
}

/// Inter-rater agreement tables from rater records.
pub struct Agreement {
    /// `rater_i,rater_j,MAE,SD`; pairs of raters, then each rater against
    /// the consensus (`rater_j = consensus`).
    pub mae_csv: String,
    /// `rater_i,rater_j,kappa` (Cohen per pair, region cells pooled) and a
    /// final `all,all` Fleiss row.
    pub kappa_csv: String,
}

pub fn agreement(records: &[crate::scoring::RaterRecord]) -> Result<Agreement> {
    use crate::scoring::{cohen_kappa, consensus, fleiss_kappa, RaterPanel};
    use std::collections::BTreeMap;

    let mut by_image: BTreeMap<&str, Vec<crate::scoring::RaterVote>> = BTreeMap::new();
    for r in records {
        by_image
            .entry(r.id.as_str())
            .or_default()
            .push(r.vote.clone());
    }
    let mut raters: Vec<(u32, String)> = records
        .iter()
        .map(|r| (r.vote.seniority, r.vote.rater.clone()))
        .collect();
    raters.sort();
    raters.dedup();
    if raters.len() < 2 {
        return Err(contract_err!("agreement needs at least two raters"));
    }
    // cells[rater][k]: every region score of every image, in a fixed order
    let mut cells: Vec<Vec<u8>> = vec![Vec::new(); raters.len()];
    let mut cons: Vec<u8> = Vec::new();
    for (id, votes) in &by_image {
        if votes.len() != raters.len() {
            return Err(contract_err!(
                "image {id} has {} of {} ratings",
                votes.len(),
                raters.len()
            ));
        }
        let panel = RaterPanel::new(votes.clone())?;
        cons.extend(consensus(&panel).cells());
        for (k, (_, name)) in raters.iter().enumerate() {
            let v = votes
                .iter()
                .find(|v| &v.rater == name)
                .expect("count checked");
            cells[k].extend(v.score.cells());
        }
    }
    let stats = |a: &[u8], b: &[u8]| {
        let d: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        (m, sd)
    };
    let na = |k: Option<f64>| k.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
    let mut mae_csv = String::from("rater_i,rater_j,MAE,SD\n");
    let mut kappa_csv = String::from("rater_i,rater_j,kappa\n");
    for i in 0..raters.len() {
        for j in i + 1..raters.len() {
            let (m, sd) = stats(&cells[i], &cells[j]);
            let _ = writeln!(mae_csv, "{},{},{m:.6},{sd:.6}", raters[i].1, raters[j].1);
            let _ = writeln!(
                kappa_csv,
                "{},{},{}",
                raters[i].1,
                raters[j].1,
                na(cohen_kappa(&cells[i], &cells[j])?)
            );
        }
    }
    for (k, (_, name)) in raters.iter().enumerate() {
        let (m, sd) = stats(&cells[k], &cons);
        let _ = writeln!(mae_csv, "{name},consensus,{m:.6},{sd:.6}");
    }
    let items: Vec<Vec<u8>> = (0..cons.len())
        .map(|c| cells.iter().map(|r| r[c]).collect())
        .collect();
    let _ = writeln!(kappa_csv, "all,all,{}", na(fleiss_kappa(&items)?));
    Ok(Agreement { mae_csv, kappa_csv })
}
