//! Every differentiable primitive against central finite differences, on ten
//! random shapes each, in 64-bit mode. Each check reports the first failure.

use lungscore::network::AttentionMode;
use lungscore::tensor::gradcheck::{self, EPS};
use lungscore::tensor::{roi_band_boxes, Graph, Tensor, Var};
use lungscore::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;
const SHAPES: u64 = 10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so kinks sit far from every probe.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub type Check = std::result::Result<(), String>;

fn within(
    name: &str,
    seed: u64,
    tol: f64,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Check {
    let reports = gradcheck::check(inputs, EPS, 200, f).map_err(|e| format!("{name}: {e}"))?;
    for (k, r) in reports.iter().enumerate() {
        if !(r.rel_err <= tol) {
            return Err(format!(
                "{name} (shape seed {seed}, input {k}): rel err {:.3e}, abs {:.3e}",
                r.rel_err, r.max_abs_err
            ));
        }
    }
    Ok(())
}

fn check(
    name: &str,
    seed: u64,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Check {
    within(name, seed, TOL, inputs, f)
}

fn each_shape(name: &str, mut body: impl FnMut(&mut ChaCha8Rng, u64) -> Check) -> Check {
    for seed in 0..SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        body(&mut rng, seed)?;
    }
    Ok(())
}

fn nchw(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(2..7),
        rng.random_range(2..7),
    ]
}

pub fn conv2d_gradients() -> Check {
    each_shape("conv2d", |rng, seed| {
        let k = [1usize, 3][rng.random_range(0..2)];
        let pad = if k == 3 { rng.random_range(0..2) } else { 0 };
        let stride = rng.random_range(1..3);
        let (n, c, o) = (
            rng.random_range(1..3),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let h = rng.random_range(k.max(2)..8);
        let w = rng.random_range(k.max(2)..8);
        let inputs = [
            rand_tensor(rng, &[n, c, h, w]),
            rand_tensor(rng, &[o, c, k, k]),
            rand_tensor(rng, &[o]),
        ];
        check("conv2d", seed, &inputs, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        })?;
        Ok(())
    })
}

pub fn conv2d_gradient_on_2x3x8x8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [
        rand_tensor(&mut rng, &[2, 3, 8, 8]),
        rand_tensor(&mut rng, &[4, 3, 3, 3]),
        rand_tensor(&mut rng, &[4]),
    ];
    check("conv2d 2x3x8x8", 0, &inputs, |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    })
}

pub fn linear_gradients() -> Check {
    each_shape("linear", |rng, seed| {
        let (n, i, o) = (
            rng.random_range(1..5),
            rng.random_range(1..9),
            rng.random_range(1..7),
        );
        let inputs = [
            rand_tensor(rng, &[n, i]),
            rand_tensor(rng, &[o, i]),
            rand_tensor(rng, &[o]),
        ];
        check("linear", seed, &inputs, |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        })?;
        Ok(())
    })
}

pub fn pooling_and_resampling_gradients() -> Check {
    each_shape("pool", |rng, seed| {
        let s = nchw(rng);
        let x = [rand_tensor(rng, &s)];
        check("max_pool2", seed, &x, |g, v| g.max_pool2(v[0]))?;
        check("avg_pool2", seed, &x, |g, v| g.avg_pool(v[0], 2))?;
        check("upsample2", seed, &x, |g, v| g.upsample2(v[0]))?;
        check("global_avg_pool", seed, &x, |g, v| g.global_avg_pool(v[0]))?;
        let ch = rng.random_range(0..s[1]);
        check("select_channel", seed, &x, |g, v| {
            g.select_channel(v[0], ch)
        })?;
        Ok(())
    })
}

pub fn concat_and_broadcast_gradients() -> Check {
    each_shape("concat", |rng, seed| {
        let [n, c, h, w] = nchw(rng);
        let c2 = rng.random_range(1..4);
        let inputs = [
            rand_tensor(rng, &[n, c, h, w]),
            rand_tensor(rng, &[n, c2, h, w]),
            rand_tensor(rng, &[n, 1, h, w]),
        ];
        check("concat", seed, &inputs, |g, v| {
            g.concat(&[v[0], v[1], v[2]])
        })?;
        check("mul_channel", seed, &inputs, |g, v| {
            g.mul_channel(v[0], v[2])
        })?;
        Ok(())
    })
}

pub fn elementwise_gradients() -> Check {
    each_shape("elementwise", |rng, seed| {
        let s = nchw(rng);
        let ab = [rand_tensor(rng, &s), rand_tensor(rng, &s)];
        check("add", seed, &ab, |g, v| g.add(v[0], v[1]))?;
        check("sub", seed, &ab, |g, v| g.sub(v[0], v[1]))?;
        check("mul", seed, &ab, |g, v| g.mul(v[0], v[1]))?;
        let pos = Tensor::from_fn(&s, |_| rng.random_range(0.5..2.0));
        let num_den = [ab[0].clone(), pos.clone()];
        check("div", seed, &num_den, |g, v| g.div(v[0], v[1]))?;
        check("log", seed, &[pos], |g, v| Ok(g.log(v[0])))?;
        let x = [rand_tensor(rng, &s)];
        check("scale", seed, &x, |g, v| Ok(g.scale(v[0], -1.7)))?;
        check("add_scalar", seed, &x, |g, v| Ok(g.add_scalar(v[0], 0.3)))?;
        check("swish", seed, &x, |g, v| Ok(g.swish(v[0])))?;
        check("sigmoid", seed, &x, |g, v| Ok(g.sigmoid(v[0])))?;
        let k = [away_from_zero(rng, &s)];
        check("relu", seed, &k, |g, v| Ok(g.relu(v[0])))?;
        check("abs", seed, &k, |g, v| Ok(g.abs(v[0])))?;
        check("clamp_min", seed, &k, |g, v| Ok(g.clamp_min(v[0], 0.0)))?;
        Ok(())
    })
}

pub fn softmax_and_reduction_gradients() -> Check {
    each_shape("softmax", |rng, seed| {
        let s = nchw(rng);
        let axis = rng.random_range(0..4);
        let x = [Tensor::from_fn(&s, |_| rng.random_range(-3.0..3.0))];
        check("softmax", seed, &x, |g, v| g.softmax(v[0], axis))?;
        check("sum_all", seed, &x, |g, v| Ok(g.sum_all(v[0])))?;
        check("mean_all", seed, &x, |g, v| Ok(g.mean_all(v[0])))?;
        check("sum_last", seed, &x, |g, v| g.sum_last(v[0]))?;
        check("sum_per_item", seed, &x, |g, v| Ok(g.sum_per_item(v[0])))?;
        check("normalize_items", seed, &x, |g, v| {
            Ok(g.normalize_items(v[0], 1e-5))
        })?;
        let flat = [s[0] * s[1], s[2] * s[3]];
        check("reshape", seed, &x, |g, v| g.reshape(v[0], &flat))?;
        let idx: Vec<usize> = (0..flat[0]).map(|_| rng.random_range(0..flat[1])).collect();
        check("gather_last", seed, &x, |g, v| {
            let r = g.reshape(v[0], &flat)?;
            g.gather_last(r, &idx)
        })
    })
}

pub fn affine_grid_gradients() -> Check {
    each_shape("affine_grid", |rng, seed| {
        let n = rng.random_range(1..3);
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let theta = [rand_tensor(rng, &[n, 6])];
        check("affine_grid", seed, &theta, |g, v| {
            g.affine_grid(v[0], h, w)
        })?;
        Ok(())
    })
}

/// Normalized coordinate whose pixel position has a fractional part in
/// [0.1, 0.9], so finite differences never straddle a bilinear cell edge.
fn safe_coord(rng: &mut ChaCha8Rng, size: usize) -> f64 {
    let cell = rng.random_range(0..size.saturating_sub(1).max(1)) as f64;
    let pix = cell + rng.random_range(0.1..0.9);
    (2.0 * pix + 1.0) / size as f64 - 1.0
}

pub fn grid_sample_gradients() -> Check {
    each_shape("grid_sample", |rng, seed| {
        let [n, c, h, w] = nchw(rng);
        let (ho, wo) = (rng.random_range(1..6), rng.random_range(1..6));
        let x = rand_tensor(rng, &[n, c, h, w]);
        let mut grid = Vec::with_capacity(n * ho * wo * 2);
        for _ in 0..n * ho * wo {
            grid.push(safe_coord(rng, w));
            grid.push(safe_coord(rng, h));
        }
        let grid = Tensor::new(&[n, ho, wo, 2], grid).unwrap();
        check("grid_sample", seed, &[x, grid], |g, v| {
            g.grid_sample(v[0], v[1])
        })?;
        Ok(())
    })
}

pub fn roi_pool_gradients() -> Check {
    each_shape("roi_pool", |rng, seed| {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..3);
        let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
        let x = [rand_tensor(rng, &[n, c, h, w])];
        let boxes = roi_band_boxes();
        check("roi_pool", seed, &x, |g, v| g.roi_pool(v[0], &boxes, 4))?;
        Ok(())
    })
}

pub fn composed_alignment_chain() -> Check {
    // theta -> grid -> sample -> softmax -> weighted sum, through every
    // stage at once.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = Tensor::new(&[1, 6], vec![0.9, 0.05, 0.02, -0.04, 0.95, -0.03]).unwrap();
    let x = rand_tensor(&mut rng, &[1, 2, 6, 6]);
    // Bilinear sampling is only piecewise smooth, so allow for a probe
    // landing on a cell edge in this uncontrolled configuration.
    within("alignment chain", 0, 1e-2, &[theta, x], |g, v| {
        let grid = g.affine_grid(v[0], 5, 5)?;
        let s = g.grid_sample(v[1], grid)?;
        g.softmax(s, 1)
    })
}

/// Every primitive check in turn.
pub fn primitive_suite() -> Check {
    conv2d_gradients()?;
    conv2d_gradient_on_2x3x8x8()?;
    linear_gradients()?;
    pooling_and_resampling_gradients()?;
    concat_and_broadcast_gradients()?;
    elementwise_gradients()?;
    softmax_and_reduction_gradients()?;
    affine_grid_gradients()?;
    grid_sample_gradients()?;
    roi_pool_gradients()?;
    composed_alignment_chain()
}

/// Composite loss through the whole network, both attention modes.
pub fn end_to_end() -> Check {
    for mode in [AttentionMode::Hard, AttentionMode::Soft] {
        for (name, rel) in super::end_to_end_gradcheck(mode, 3) {
            if !(rel <= 1e-2) {
                return Err(format!("{mode:?} {name}: rel err {rel:.3e}"));
            }
        }
    }
    Ok(())
}
