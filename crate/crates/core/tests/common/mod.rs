#![allow(dead_code)]

pub mod explain_checks;
pub mod gradients;
pub mod invariants;
pub mod loss_fixtures;
pub mod toolbox;

use lungscore::losses::{composite_loss, LossConfig};
use lungscore::network::{AlignControl, AttentionMode, Model, NetConfig};
use lungscore::scoring::BrixiaScore;
use lungscore::tensor::{Graph, Tensor, Var};
use lungscore::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central differences on selected parameters of a double-precision model.
/// Returns `(parameter, relative error)` with the relative error defined as
/// `max |analytic - numeric| / max(max |numeric|, max |analytic|, 1e-6)`.
pub fn param_gradcheck(
    model: &mut Model<f64>,
    names: &[&str],
    per_param: usize,
    eps: f64,
    loss: impl Fn(&Model<f64>, &mut Graph<f64>) -> Result<Var>,
) -> Vec<(String, f64)> {
    let mut g = Graph::new();
    let l = loss(model, &mut g).unwrap();
    let grads = g.backward(l).unwrap();
    model.params.zero_grads();
    model.params.accumulate(&g, &grads);
    let mut out = Vec::new();
    for &name in names {
        let id = model
            .params
            .find(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        let analytic = model
            .params
            .tensor(id)
            .grad()
            .expect("gradient buffer")
            .to_vec();
        let n = analytic.len();
        let stride = n.div_ceil(per_param).max(1);
        let (mut max_abs, mut max_num, mut max_an) = (0.0f64, 0.0f64, 0.0f64);
        for i in (0..n).step_by(stride) {
            let orig = model.params.tensor(id).data()[i];
            let eval = |v: f64, m: &mut Model<f64>| {
                m.params.tensor_mut(id).data_mut()[i] = v;
                let mut g = Graph::new();
                let l = loss(m, &mut g).unwrap();
                g.data(l)[0]
            };
            let fp = eval(orig + eps, model);
            let fm = eval(orig - eps, model);
            model.params.tensor_mut(id).data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * eps);
            max_abs = max_abs.max((num - analytic[i]).abs());
            max_num = max_num.max(num.abs());
            max_an = max_an.max(analytic[i].abs());
        }
        out.push((name.to_string(), max_abs / max_num.max(max_an).max(1e-6)));
    }
    model.params.zero_grads();
    out
}

/// Parameters spanning every branch of the network.
pub const PROBE_PARAMS: [&str; 10] = [
    "backbone.stem.w",
    "backbone.s3.b1.c2.w",
    "seg.x02.w",
    "seg.out.w",
    "align.c0.w",
    "align.fc2.w",
    "align.fc2.b",
    "head.lat0.w",
    "head.fuse.w",
    "head.cls.b",
];

/// Composite loss of the whole network at 16×16 against finite
/// differences. The zero-initialized output layers get small random values
/// first so that every path carries gradient.
pub fn end_to_end_gradcheck(mode: AttentionMode, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: Model<f64> = Model::new(NetConfig::with_input_size(16), seed)
        .unwrap()
        .cast();
    for (name, scale) in [("seg.out.w", 0.3), ("align.fc2.w", 0.02)] {
        let id = model.params.find(name).unwrap();
        for v in model.params.tensor_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let y: Vec<BrixiaScore> = (0..2)
        .map(|_| BrixiaScore::new(std::array::from_fn(|_| rng.random_range(0..4))).unwrap())
        .collect();
    let cfg = LossConfig::default();
    param_gradcheck(&mut model, &PROBE_PARAMS, 12, 1e-5, |m, g| {
        let xv = g.input(x.clone());
        let out = m.forward_full(g, xv, mode, AlignControl::Estimated)?;
        composite_loss(g, out.dist, &y, &cfg)
    })
}
