//! Hand-derived loss values: uniform, one-hot and large-beta cases.

use lungscore::losses::{composite_value, mae_d_value, scce_value, LossConfig};
use lungscore::network::ScoreDistribution;
use lungscore::scoring::BrixiaScore;

pub fn one_hot(classes: [usize; 6]) -> ScoreDistribution {
    let mut p = [[0.0f32; 4]; 6];
    for (r, &c) in classes.iter().enumerate() {
        p[r][c] = 1.0;
    }
    ScoreDistribution::new(p).unwrap()
}

pub fn score(v: [u8; 6]) -> BrixiaScore {
    BrixiaScore::new(v).unwrap()
}

pub fn scce_fixtures() {
    let y = score([0, 1, 2, 3, 2, 1]);
    assert_eq!(scce_value(&one_hot([0, 1, 2, 3, 2, 1]), &y).unwrap(), 0.0);

    let mut p = [[0.0f32; 4]; 6];
    for (r, &c) in y.cells().iter().enumerate() {
        p[r][c as usize] = 1.0;
    }
    p[2] = [0.25, 0.25, 0.5, 0.0];
    let half = ScoreDistribution::new(p).unwrap();
    assert!((scce_value(&half, &y).unwrap() - 2f64.ln() / 6.0).abs() < 1e-6);

    assert!((scce_value(&ScoreDistribution::uniform(), &y).unwrap() - 4f64.ln()).abs() < 1e-6);
}

pub fn scce_clamps_zero_probability() {
    // true class has probability 0 in one region: -ln(1e-12) / 6
    let d = one_hot([1, 0, 0, 0, 0, 0]);
    let v = scce_value(&d, &score([0; 6])).unwrap();
    assert!((v - (-(1e-12f64).ln()) / 6.0).abs() < 1e-9);
}

pub fn mae_d_fixtures() {
    for beta in [0.5, 10.0, 50.0] {
        let v = mae_d_value(&ScoreDistribution::uniform(), &score([0; 6]), beta).unwrap();
        assert!((v - 1.5).abs() < 1e-6, "beta {beta}: {v}");
    }
    let v = mae_d_value(&one_hot([2; 6]), &score([2; 6]), 50.0).unwrap();
    assert!(v <= 1e-3, "{v}");

    let expected = 6.0 / (3.0 + 10f64.exp());
    let v = mae_d_value(&one_hot([3; 6]), &score([3; 6]), 10.0).unwrap();
    assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
    assert!((v - 2.7e-4).abs() < 1e-5);
}

pub fn mae_d_beta_limit_approaches_class_distance() {
    for c in 0..4usize {
        for y in 0..4u8 {
            let target = (c as f64 - y as f64).abs();
            let mut prev = f64::INFINITY;
            for beta in [1.0, 5.0, 10.0, 20.0, 50.0] {
                let v = mae_d_value(&one_hot([c; 6]), &score([y; 6]), beta).unwrap();
                let gap = (v - target).abs();
                assert!(gap <= prev + 1e-12, "c {c} y {y} beta {beta}: not monotone");
                prev = gap;
            }
            assert!(prev <= 1e-3, "c {c} y {y}: {prev}");
        }
    }
}

pub fn composite_fixtures() {
    let y = score([0, 1, 2, 3, 2, 1]);
    let d = ScoreDistribution::uniform();
    let s = scce_value(&d, &y).unwrap();
    let m = mae_d_value(&d, &y, 10.0).unwrap();
    assert_eq!(
        composite_value(
            &d,
            &y,
            &LossConfig {
                alpha: 1.0,
                beta: 10.0
            }
        )
        .unwrap(),
        s
    );
    assert_eq!(
        composite_value(
            &d,
            &y,
            &LossConfig {
                alpha: 0.0,
                beta: 10.0
            }
        )
        .unwrap(),
        m
    );
    let c = composite_value(
        &d,
        &y,
        &LossConfig {
            alpha: 0.7,
            beta: 10.0,
        },
    )
    .unwrap();
    assert!((c - (0.7 * s + 0.3 * m)).abs() < 1e-9);
}

pub fn all() {
    scce_fixtures();
    scce_clamps_zero_probability();
    mae_d_fixtures();
    mae_d_beta_limit_approaches_class_distance();
    composite_fixtures();
}
