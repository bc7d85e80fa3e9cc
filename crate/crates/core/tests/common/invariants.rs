//! Randomized structural invariants. Each check runs `cases` proptest cases
//! and reports the first counterexample as an error string.

use lungscore::imaging::GrayImage;
use lungscore::network::{AlignControl, AttentionMode, Model, NetConfig, ScoreDistribution};
use lungscore::scoring::{flip_score, global_score, BrixiaScore};
use lungscore::tensor::{identity_theta, roi_band_boxes, Graph, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

/// A model whose zero-initialized output layers carry random weights, so
/// masks and alignment estimates are not constant.
pub fn randomized_model(size: usize, seed: u64) -> Model {
    let mut model = Model::new(NetConfig::with_input_size(size), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, scale) in [("seg.out.w", 0.5f32), ("align.fc2.w", 0.05)] {
        let id = model.params.find(name).unwrap();
        for v in model.params.tensor_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    model
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor {
    Tensor::from_fn(&[n, 1, size, size], |_| rng.random_range(0.0..1.0))
}

/// Every region of every predicted distribution is a probability vector.
pub fn score_distribution_normalized(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(any::<u64>(), any::<bool>(), any::<bool>()),
            |(seed, hard, estimated)| {
                let model = randomized_model(16, seed % 64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut g = Graph::new();
                let x = g.input(random_batch(&mut rng, 2, 16));
                let mode = if hard {
                    AttentionMode::Hard
                } else {
                    AttentionMode::Soft
                };
                let control = if estimated {
                    AlignControl::Estimated
                } else {
                    AlignControl::Identity
                };
                let out = model.forward_full(&mut g, x, mode, control).unwrap();
                prop_assert_eq!(g.shape(out.dist), &[2, 6, 4][..]);
                for item in g.data(out.dist).chunks(24) {
                    for region in item.chunks(4) {
                        let s: f64 = region.iter().map(|&p| p as f64).sum();
                        prop_assert!((s - 1.0).abs() <= 1e-5, "region sums to {}", s);
                        prop_assert!(region.iter().all(|&p| (0.0..=1.0).contains(&p)));
                    }
                    prop_assert!(ScoreDistribution::from_flat(item).is_ok());
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

/// With an all-ones mask and the identity map, hard attention multiplies by
/// exactly one, so aligned features and scores match soft attention bit for
/// bit.
pub fn hard_equals_soft_under_full_mask(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&any::<u64>(), |seed| {
            let model = randomized_model(32, seed % 64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.input(random_batch(&mut rng, 2, 32));
            let seg = model.segment(&mut g, x).unwrap();
            let ones = g.input(Tensor::from_fn(&[2, 1, 32, 32], |_| 1.0));
            let id: Vec<f32> = (0..2).flat_map(|_| identity_theta::<f32>()).collect();
            let theta = g.input(Tensor::new(&[2, 6], id).unwrap());
            let (ha, _) = model
                .align(&mut g, &seg.features, ones, theta, AttentionMode::Hard)
                .unwrap();
            let (sa, _) = model
                .align(&mut g, &seg.features, ones, theta, AttentionMode::Soft)
                .unwrap();
            for lvl in 0..4 {
                prop_assert_eq!(g.data(ha[lvl]), g.data(sa[lvl]), "level {}", lvl);
            }
            let dh = model.score(&mut g, &ha).unwrap();
            let ds = model.score(&mut g, &sa).unwrap();
            prop_assert_eq!(g.data(dh), g.data(ds));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Bands start at 0, 0.3H and 0.6H with height 0.4H, so neighbours share a
/// quarter of a band; columns split the width in half. Pooling a ramp over
/// each box averages to the box centre.
pub fn roi_band_geometry(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(4usize..160, 4usize..160), |(h, w)| {
            let boxes = roi_band_boxes();
            let (hf, wf) = (h as f64, w as f64);
            for row in 0..3 {
                for col in 0..2 {
                    let b = boxes[row * 2 + col];
                    prop_assert!((b.y0 * hf - 0.3 * row as f64 * hf).abs() < 1e-9);
                    prop_assert!(((b.y1 - b.y0) * hf - 0.4 * hf).abs() < 1e-9);
                    prop_assert!((b.x0 * wf - 0.5 * col as f64 * wf).abs() < 1e-9);
                    prop_assert!(((b.x1 - b.x0) * wf - 0.5 * wf).abs() < 1e-9);
                }
            }
            for row in 0..2 {
                let (a, b) = (boxes[row * 2], boxes[(row + 1) * 2]);
                let overlap = (a.y1 - b.y0) / (a.y1 - a.y0);
                prop_assert!((overlap - 0.25).abs() < 1e-9, "overlap {}", overlap);
            }
            prop_assert!(boxes[0].y0 == 0.0 && (boxes[4].y1 - 1.0).abs() < 1e-12);

            // channel 0 ramps down the rows, channel 1 across the columns
            let x = Tensor::from_fn(&[1, 2, h, w], |i| {
                let (c, y, xx) = (i / (h * w), i / w % h, i % w);
                if c == 0 {
                    ((y as f64 + 0.5) / hf) as f32
                } else {
                    ((xx as f64 + 0.5) / wf) as f32
                }
            });
            let mut g = Graph::new();
            let xv = g.input(x);
            let bins = 4;
            let pooled = g.roi_pool(xv, &boxes, bins).unwrap();
            let data = g.data(pooled);
            for (r, b) in boxes.iter().enumerate() {
                for (c, want) in [(0, (b.y0 + b.y1) / 2.0), (1, (b.x0 + b.x1) / 2.0)] {
                    let off = (r * 2 + c) * bins * bins;
                    let mean: f64 = data[off..off + bins * bins]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>()
                        / 16.0;
                    let tol = 1.0 / hf.min(wf);
                    prop_assert!(
                        (mean - want).abs() <= tol,
                        "region {} channel {}: {} vs {}",
                        r,
                        c,
                        mean,
                        want
                    );
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Flipping twice is the identity, for scores and images, and a flip never
/// changes the Global Score.
pub fn flip_involution(cases: u32) -> Result<(), String> {
    let cells = proptest::array::uniform6(0u8..4);
    runner(cases)
        .run(
            &(cells, 1usize..40, 1usize..40, any::<u64>()),
            |(cells, h, w, seed)| {
                let s = BrixiaScore::new(cells).unwrap();
                let f = flip_score(&s);
                prop_assert_eq!(flip_score(&f), s);
                prop_assert_eq!(global_score(&f), global_score(&s));
                for row in 0..3 {
                    prop_assert_eq!(f.get(row, 0), s.get(row, 1));
                    prop_assert_eq!(f.get(row, 1), s.get(row, 0));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let img = GrayImage::from_fn(h, w, |_, _| rng.random_range(0.0..1.0));
                prop_assert_eq!(img.hflip().hflip(), img.clone());
                prop_assert_eq!(img.hflip().get(0, 0), img.get(0, w - 1));
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

/// Sampling through the identity map reproduces the input exactly.
pub fn identity_grid_exact(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(1usize..4, 1usize..4, 1usize..80, 1usize..80, any::<u64>()),
            |(n, c, h, w, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-5.0..5.0));
                let id: Vec<f32> = (0..n).flat_map(|_| identity_theta::<f32>()).collect();
                let mut g = Graph::new();
                let xv = g.input(x.clone());
                let th = g.input(Tensor::new(&[n, 6], id).unwrap());
                let grid = g.affine_grid(th, h, w).unwrap();
                let y = g.grid_sample(xv, grid).unwrap();
                prop_assert_eq!(g.data(y), x.data());

                // the same in double precision
                let x64 = Tensor::<f64>::from_fn(&[n, c, h, w], |_| rng.random_range(-5.0..5.0));
                let id: Vec<f64> = (0..n).flat_map(|_| identity_theta::<f64>()).collect();
                let mut g = Graph::<f64>::new();
                let xv = g.input(x64.clone());
                let th = g.input(Tensor::new(&[n, 6], id).unwrap());
                let grid = g.affine_grid(th, h, w).unwrap();
                let y = g.grid_sample(xv, grid).unwrap();
                prop_assert_eq!(g.data(y), x64.data());
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}
