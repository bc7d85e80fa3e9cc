//! Brute-force replica oracle and the trivial cases of the occlusion map.

use lungscore::explain::{explain_with, explanation_map, occlude, render_rgb, DEFAULT_COMPACTNESS};
use lungscore::imaging::{extract_superpixels, GrayImage};
use lungscore::network::{predict_score, AlignControl, AttentionMode, Model};

type Check = Result<(), String>;

fn single(model: &Model, img: &GrayImage, mode: AttentionMode) -> Result<Vec<f32>, String> {
    let p = model
        .predict(&[img], mode, AlignControl::Estimated)
        .map_err(|e| e.to_string())?;
    Ok(p[0].dist.flat())
}

/// Zeroes each superpixel in turn, runs the model on that image alone and
/// accumulates `p_i - p_0` over the superpixel's pixels; the result must
/// match the dense map within `1e-6`. Returns the largest deviation.
pub fn oracle_equality(
    model: &Model,
    img: &GrayImage,
    n: usize,
    mode: AttentionMode,
) -> Result<f64, String> {
    let e = explanation_map(model, img, n, mode).map_err(|e| e.to_string())?;
    let sp = &e.superpixels;
    if e.forward_passes != sp.count() + 1 || e.deltas.len() != sp.count() {
        return Err(format!(
            "{} passes for {} superpixels",
            e.forward_passes,
            sp.count()
        ));
    }
    let (h, w) = (img.height(), img.width());
    let p0 = single(model, img, mode)?;
    let mut oracle = vec![0.0f64; h * w * 24];
    for label in 0..sp.count() as u32 {
        let mut replica = img.clone();
        for (i, px) in replica.pixels_mut().iter_mut().enumerate() {
            if sp.labels()[i] == label {
                *px = 0.0;
            }
        }
        let pi = single(model, &replica, mode)?;
        for (i, &l) in sp.labels().iter().enumerate() {
            if l == label {
                for k in 0..24 {
                    oracle[i * 24 + k] += (pi[k] - p0[k]) as f64;
                }
            }
        }
    }
    let dense = e.dense();
    if dense.len() != oracle.len() {
        return Err(format!(
            "dense map has {} values, expected {}",
            dense.len(),
            oracle.len()
        ));
    }
    let worst = dense
        .iter()
        .zip(&oracle)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);
    if worst > 1e-6 {
        return Err(format!("max deviation from the replica loop {worst:.3e}"));
    }
    if !oracle.iter().any(|v| v.abs() > 1e-5) {
        return Err("explanation is trivially zero".into());
    }
    Ok(worst)
}

/// One superpixel covering the image: the map is the all-zero image's
/// prediction minus the original's.
pub fn single_superpixel(model: &Model, img: &GrayImage, mode: AttentionMode) -> Check {
    let sp = extract_superpixels(img, 1, DEFAULT_COMPACTNESS).map_err(|e| e.to_string())?;
    if sp.count() != 1 {
        return Err(format!("{} superpixels for N=1", sp.count()));
    }
    let e = explain_with(model, img, &sp, mode).map_err(|e| e.to_string())?;
    let blank = GrayImage::filled(img.height(), img.width(), 0.0);
    if occlude(img, &sp, 0) != blank || e.forward_passes != 2 {
        return Err("N=1 replica is not the blank image".into());
    }
    let p0 = single(model, img, mode)?;
    let p1 = single(model, &blank, mode)?;
    for k in 0..24 {
        let d = (e.deltas[0][k] - (p1[k] - p0[k])).abs();
        if d > 1e-6 {
            return Err(format!("N=1 channel {k} off by {d:.3e}"));
        }
    }
    Ok(())
}

/// With the classifier weights zeroed every replica predicts the same
/// distribution, so the map and its overlay are empty.
pub fn constant_model(model: &Model, img: &GrayImage, mode: AttentionMode) -> Check {
    let mut flat = model.clone();
    let id = flat.params.find("head.cls.w").ok_or("no head.cls.w")?;
    flat.params.tensor_mut(id).data_mut().fill(0.0);
    let e = explanation_map(&flat, img, 16, mode).map_err(|e| e.to_string())?;
    if let Some(d) = e.deltas.iter().flatten().find(|d| **d != 0.0) {
        return Err(format!("constant model produced delta {d}"));
    }
    if render_rgb(&e, &predict_score(&e.p0))
        .iter()
        .any(|&c| c != 255)
    {
        return Err("empty explanation renders colour".into());
    }
    Ok(())
}
