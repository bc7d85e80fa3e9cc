//! Training losses on graph variables.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::network::ScoreDistribution;
use crate::scoring::{BrixiaScore, CLASSES, REGIONS};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Smoothing term of the Dice loss.
pub const DICE_EPS: f64 = 1.0;
/// Probability floor inside the cross-entropy log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the cross-entropy term; `1 - alpha` goes to the MAE term.
    pub alpha: f64,
    /// Sharpness of the expected-class softmax.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta {} must be positive",
                self.beta
            )));
        }
        Ok(())
    }
}

/// `1 - (2|P∩T| + 1) / (|P| + |T| + 1)` per item, averaged over the batch.
/// `pred` is `[N, ...]`; `target` must have the same shape.
pub fn dice_loss<T: Float>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(shape_err!(
            "dice_loss: prediction {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        ));
    }
    let t = g.input(target.clone());
    let inter = g.mul(pred, t)?;
    let inter = g.sum_per_item(inter);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let p = g.sum_per_item(pred);
    let ts = g.sum_per_item(t);
    let den = g.add(p, ts)?;
    let den = g.add_scalar(den, DICE_EPS);
    let ratio = g.div(num, den)?;
    let m = g.mean_all(ratio);
    let neg = g.scale(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

fn check_dist<T: Float>(g: &Graph<T>, dist: Var, y: &[BrixiaScore]) -> Result<usize> {
    match *g.shape(dist) {
        [n, REGIONS, CLASSES] if n == y.len() && n > 0 => Ok(n),
        ref s => Err(shape_err!(
            "score loss: distribution {s:?} for {} labels",
            y.len()
        )),
    }
}

/// Mean over items and regions of `-ln max(p_true, 1e-12)`.
pub fn scce<T: Float>(g: &mut Graph<T>, dist: Var, y: &[BrixiaScore]) -> Result<Var> {
    let n = check_dist(g, dist, y)?;
    let flat = g.reshape(dist, &[n * REGIONS, CLASSES])?;
    let idx: Vec<usize> = y.iter().flat_map(|s| s.cells().map(usize::from)).collect();
    let p = g.gather_last(flat, &idx)?;
    let p = g.clamp_min(p, PROB_FLOOR);
    let l = g.log(p);
    let m = g.mean_all(l);
    Ok(g.scale(m, -1.0))
}

/// Mean over items and regions of `|y - Σ_c c·softmax(β·p)_c|`.
pub fn mae_d<T: Float>(g: &mut Graph<T>, dist: Var, y: &[BrixiaScore], beta: f64) -> Result<Var> {
    let n = check_dist(g, dist, y)?;
    if !(beta > 0.0) {
        return Err(contract_err!("mae_d: beta must be positive, got {beta}"));
    }
    let sharp = g.scale(dist, beta);
    let w = g.softmax(sharp, 2)?;
    let classes = g.input(Tensor::from_fn(&[n, REGIONS, CLASSES], |i| {
        T::lit((i % CLASSES) as f64)
    }));
    let weighted = g.mul(w, classes)?;
    let expected = g.sum_last(weighted)?;
    let target: Vec<T> = y
        .iter()
        .flat_map(|s| s.cells().map(|v| T::lit(v as f64)))
        .collect();
    let target = g.input(Tensor::new(&[n, REGIONS], target)?);
    let d = g.sub(expected, target)?;
    let d = g.abs(d);
    Ok(g.mean_all(d))
}

/// `α·scce + (1 − α)·mae_d`.
pub fn composite_loss<T: Float>(
    g: &mut Graph<T>,
    dist: Var,
    y: &[BrixiaScore],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let s = scce(g, dist, y)?;
    let m = mae_d(g, dist, y, cfg.beta)?;
    let s = g.scale(s, cfg.alpha);
    let m = g.scale(m, 1.0 - cfg.alpha);
    g.add(s, m)
}

fn eval_on(
    dist: &ScoreDistribution,
    f: impl FnOnce(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let d: Vec<f64> = dist.flat().iter().map(|&v| v as f64).collect();
    let d = g.input(Tensor::new(&[1, REGIONS, CLASSES], d)?);
    let l = f(&mut g, d)?;
    Ok(g.data(l)[0])
}

/// Loss values for a single distribution, evaluated in double precision.
pub fn scce_value(dist: &ScoreDistribution, y: &BrixiaScore) -> Result<f64> {
    eval_on(dist, |g, d| scce(g, d, std::slice::from_ref(y)))
}

pub fn mae_d_value(dist: &ScoreDistribution, y: &BrixiaScore, beta: f64) -> Result<f64> {
    eval_on(dist, |g, d| mae_d(g, d, std::slice::from_ref(y), beta))
}

pub fn composite_value(dist: &ScoreDistribution, y: &BrixiaScore, cfg: &LossConfig) -> Result<f64> {
    eval_on(dist, |g, d| {
        composite_loss(g, d, std::slice::from_ref(y), cfg)
    })
}

/// Dice loss of one probability mask against a target mask.
pub fn dice_loss_value(
    pred: &crate::imaging::ProbMask,
    target: &crate::imaging::ProbMask,
) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let p = g.input(pred.to_tensor().cast());
    let l = dice_loss(&mut g, p, &target.to_tensor().cast())?;
    Ok(g.data(l)[0])
}
