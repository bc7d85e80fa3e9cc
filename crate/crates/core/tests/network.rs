mod common;

use common::invariants::{self, randomized_model};
use lungscore::geometry::AffineParams;
use lungscore::imaging::GrayImage;
use lungscore::network::{
    ensemble, predict_score, AlignControl, AttentionMode, Model, NetConfig, ScoreDistribution,
};
use lungscore::tensor::{identity_theta, Graph, Tensor};
use lungscore::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn score_distributions_are_normalized() {
    invariants::score_distribution_normalized(100).unwrap();
}

#[test]
fn hard_attention_with_full_mask_is_soft_attention() {
    invariants::hard_equals_soft_under_full_mask(100).unwrap();
}

#[test]
fn roi_bands_have_fixed_geometry() {
    invariants::roi_band_geometry(100).unwrap();
}

#[test]
fn flips_are_involutions() {
    invariants::flip_involution(100).unwrap();
}

#[test]
fn identity_grid_sampling_is_exact() {
    invariants::identity_grid_exact(100).unwrap();
}

#[test]
fn untrained_model_predicts_half_and_identity() {
    let model = Model::new(NetConfig::with_input_size(32), 3).unwrap();
    let img = GrayImage::from_fn(32, 32, |y, x| ((y * 7 + x * 3) % 11) as f32 / 10.0);
    let mask = model.predict_mask(&img).unwrap();
    assert!(mask.pixels().iter().all(|&p| p == 0.5));
    let (theta, substituted) = model.estimate_affine(&mask).unwrap();
    assert_eq!(theta, AffineParams::IDENTITY);
    assert!(!substituted);
}

#[test]
fn empty_mask_falls_back_to_identity() {
    let model = randomized_model(32, 5);
    let (theta, substituted) = model
        .estimate_affine(&GrayImage::filled(32, 32, 0.0))
        .unwrap();
    assert_eq!(theta, AffineParams::IDENTITY);
    assert!(substituted);
}

#[test]
fn wrong_input_size_is_rejected() {
    let model = Model::new(NetConfig::with_input_size(32), 0).unwrap();
    let img = GrayImage::filled(16, 16, 0.5);
    for r in [
        model.predict_mask(&img).map(|_| ()),
        model
            .predict(&[&img], AttentionMode::Soft, AlignControl::Estimated)
            .map(|_| ()),
    ] {
        assert!(matches!(r, Err(Error::Contract(_))), "{r:?}");
    }
    assert!(NetConfig::with_input_size(40).validate().is_err());
}

#[test]
fn identity_alignment_keeps_features() {
    let model = randomized_model(32, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.input(Tensor::from_fn(&[1, 1, 32, 32], |_| {
        rng.random_range(0.0..1.0)
    }));
    let seg = model.segment(&mut g, x).unwrap();
    let theta = g.input(Tensor::new(&[1, 6], identity_theta::<f32>().to_vec()).unwrap());
    let (aligned, mask) = model
        .align(&mut g, &seg.features, seg.lung, theta, AttentionMode::Soft)
        .unwrap();
    for lvl in 0..4 {
        assert_eq!(g.data(aligned[lvl]), g.data(seg.features[lvl]));
    }
    assert_eq!(g.data(mask), g.data(seg.lung));
}

#[test]
fn hard_attention_with_empty_mask_zeroes_features() {
    let model = randomized_model(32, 2);
    let mut g = Graph::new();
    let x = g.input(Tensor::from_fn(&[1, 1, 32, 32], |i| (i % 13) as f32 / 12.0));
    let seg = model.segment(&mut g, x).unwrap();
    let zeros = g.input(Tensor::from_fn(&[1, 1, 32, 32], |_| 0.0));
    let theta = g.input(Tensor::new(&[1, 6], identity_theta::<f32>().to_vec()).unwrap());
    let (aligned, _) = model
        .align(&mut g, &seg.features, zeros, theta, AttentionMode::Hard)
        .unwrap();
    for a in aligned {
        assert!(g.data(a).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn constant_maps_pool_to_constants() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_fn(&[2, 3, 12, 10], |i| {
        (i / 120) as f32 + 0.25
    }));
    let boxes = lungscore::tensor::roi_band_boxes();
    let p = g.roi_pool(x, &boxes, 4).unwrap();
    assert_eq!(g.shape(p), &[12, 3, 4, 4]);
    for (k, chunk) in g.data(p).chunks(16).enumerate() {
        // rows are (item, region), each with three channel planes
        let item = k / 18;
        let ch = k % 3;
        let want = (item * 3 + ch) as f32 + 0.25;
        assert!(
            chunk.iter().all(|&v| (v - want).abs() < 1e-6),
            "{chunk:?} vs {want}"
        );
    }
}

#[test]
fn head_weights_are_shared_across_regions() {
    let model = randomized_model(32, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let widths = model.config.widths;
    let stacks: Vec<Tensor> = widths
        .iter()
        .map(|&c| Tensor::from_fn(&[6, c, 4, 4], |_| rng.random_range(-1.0..1.0)))
        .collect();
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permuted: Vec<Tensor> = stacks
        .iter()
        .map(|t| {
            let per = t.len() / 6;
            let data: Vec<f32> = perm
                .iter()
                .flat_map(|&r| t.data()[r * per..(r + 1) * per].to_vec())
                .collect();
            Tensor::new(t.shape(), data).unwrap()
        })
        .collect();
    let run = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: [_; 4] = std::array::from_fn(|l| g.input(ts[l].clone()));
        let d = model.score_regions(&mut g, &vars).unwrap();
        g.data(d).to_vec()
    };
    let base = run(&stacks);
    let moved = run(&permuted);
    for (slot, &r) in perm.iter().enumerate() {
        for k in 0..4 {
            assert!((moved[slot * 4 + k] - base[r * 4 + k]).abs() < 1e-6);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let model = randomized_model(32, 8);
    let imgs: Vec<GrayImage> = (0..3)
        .map(|k| GrayImage::from_fn(32, 32, |y, x| ((y * x + k) % 17) as f32 / 16.0))
        .collect();
    let refs: Vec<&GrayImage> = imgs.iter().collect();
    let a = model
        .predict(&refs, AttentionMode::Hard, AlignControl::Estimated)
        .unwrap();
    let b = model
        .predict(&refs, AttentionMode::Hard, AlignControl::Estimated)
        .unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.dist, q.dist);
        assert_eq!(p.mask, q.mask);
        assert_eq!(p.theta, q.theta);
    }
    let again = Model::new(NetConfig::with_input_size(32), 8).unwrap();
    let fresh = Model::new(NetConfig::with_input_size(32), 8).unwrap();
    for id in again.params.ids() {
        assert_eq!(again.params.name(id), fresh.params.name(id));
        assert_eq!(
            again.params.tensor(id).data(),
            fresh.params.tensor(id).data()
        );
    }
}

#[test]
fn batch_items_are_independent() {
    let model = randomized_model(32, 6);
    let a = GrayImage::from_fn(32, 32, |y, x| ((y + 2 * x) % 9) as f32 / 8.0);
    let b = GrayImage::from_fn(32, 32, |y, x| ((3 * y + x) % 5) as f32 / 4.0);
    let pair = model
        .predict(&[&a, &b], AttentionMode::Soft, AlignControl::Estimated)
        .unwrap();
    let alone = model
        .predict(&[&b], AttentionMode::Soft, AlignControl::Estimated)
        .unwrap();
    for (p, q) in pair[1].dist.flat().iter().zip(alone[0].dist.flat()) {
        assert!((p - q).abs() < 1e-6);
    }
}

#[test]
fn malformed_distributions_are_rejected() {
    assert!(ScoreDistribution::new([[0.5, 0.5, 0.0, 0.0]; 6]).is_ok());
    assert!(ScoreDistribution::new([[0.5, 0.6, 0.0, 0.0]; 6]).is_err());
    assert!(ScoreDistribution::new([[1.5, -0.5, 0.0, 0.0]; 6]).is_err());
    assert!(ScoreDistribution::from_flat(&[0.25; 23]).is_err());
    assert!(ensemble(&[]).is_err());
}

fn dist_strategy() -> impl Strategy<Value = ScoreDistribution> {
    proptest::collection::vec(proptest::collection::vec(0.0f32..1.0, 4), 6).prop_map(|rows| {
        let p: [[f32; 4]; 6] = std::array::from_fn(|r| {
            let row = &rows[r];
            let s: f32 = row.iter().sum::<f32>() + 1e-3;
            let mut out = [0.0; 4];
            for k in 0..4 {
                out[k] = (row[k] + 2.5e-4) / s;
            }
            let rest: f32 = out[..3].iter().sum();
            out[3] = 1.0 - rest;
            out
        });
        ScoreDistribution::new(p).unwrap()
    })
}

proptest! {
    #[test]
    fn ensembles_of_copies_change_nothing(d in dist_strategy(), k in 1usize..5) {
        let e = ensemble(&vec![d; k]).unwrap();
        prop_assert_eq!(predict_score(&e), predict_score(&d));
        for (a, b) in e.flat().iter().zip(d.flat()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ensembles_stay_normalized(ds in proptest::collection::vec(dist_strategy(), 1..6)) {
        let e = ensemble(&ds).unwrap();
        for r in 0..6 {
            let s: f32 = e.region(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn predicted_classes_are_argmax(d in dist_strategy()) {
        let s = predict_score(&d);
        for (r, &c) in s.cells().iter().enumerate() {
            let row = d.region(r);
            prop_assert!(row.iter().all(|&p| p <= row[c as usize]));
            prop_assert!(row[..c as usize].iter().all(|&p| p < row[c as usize]));
        }
    }
}
