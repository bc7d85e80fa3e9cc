//! Central finite-difference verification of analytic gradients (64-bit).

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::Result;

/// Outcome for one input tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_abs_err: f64,
    /// `max |analytic - numeric| / max(max |numeric|, max |analytic|, floor)`.
    pub rel_err: f64,
    pub checked: usize,
}

pub const EPS: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

/// Fixed non-uniform output weighting, so that outputs whose plain sum is
/// constant (softmax) still exercise the gradient.
fn weight(i: usize) -> f64 {
    0.6 + (i as f64 * 1.618).sin()
}

/// Compares the gradient of `f` with respect to each of `inputs` against
/// central differences with step `eps`. At most `max_per_input` elements of
/// each input are perturbed (evenly strided).
pub fn check<F>(
    inputs: &[Tensor<f64>],
    eps: f64,
    max_per_input: usize,
    f: F,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.data(out)
            .iter()
            .enumerate()
            .map(|(i, v)| v * weight(i))
            .sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let shape = g.shape(out).to_vec();
    let w = g.input(Tensor::from_fn(&shape, weight));
    let weighted = g.mul(out, w)?;
    let loss = g.sum_all(weighted);
    let grads = g.backward(loss)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let analytic = grads
            .get(v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        let (mut max_abs, mut max_num, mut max_an, mut checked) = (0.0f64, 0.0f64, 0.0f64, 0);
        for i in (0..n).step_by(stride) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            max_abs = max_abs.max((analytic[i] - numeric).abs());
            max_num = max_num.max(numeric.abs());
            max_an = max_an.max(analytic[i].abs());
            checked += 1;
        }
        reports.push(GradCheck {
            max_abs_err: max_abs,
            rel_err: max_abs / max_num.max(max_an).max(FLOOR),
            checked,
        });
    }
    Ok(reports)
}
