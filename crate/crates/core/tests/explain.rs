mod common;

use common::explain_checks;
use common::invariants::randomized_model;
use lungscore::explain::{
    explain_with, explanation_map, pixel_region, render_explanation, render_rgb, supportiveness,
    ExplanationMap, CLASS_COLORS, DEFAULT_COMPACTNESS,
};
use lungscore::imaging::{extract_superpixels, GrayImage};
use lungscore::network::{predict_score, AttentionMode};
use lungscore::scoring::BrixiaScore;
use lungscore::synth::{gen_phantom, PhantomSpec};

const SIZE: usize = 32;

fn phantom(seed: u64) -> GrayImage {
    let s = BrixiaScore::new([3, 0, 1, 2, 0, 1]).unwrap();
    gen_phantom(&PhantomSpec::new(seed, s, SIZE)).unwrap().image
}

#[test]
fn matches_brute_force_replica_loop() {
    let model = randomized_model(SIZE, 4);
    explain_checks::oracle_equality(&model, &phantom(1), 20, AttentionMode::Hard).unwrap();
    explain_checks::oracle_equality(&model, &phantom(2), 20, AttentionMode::Soft).unwrap();
}

#[test]
fn single_superpixel_is_the_blank_image_delta() {
    let model = randomized_model(SIZE, 9);
    explain_checks::single_superpixel(&model, &phantom(3), AttentionMode::Soft).unwrap();
}

#[test]
fn constant_model_explains_nothing() {
    let model = randomized_model(SIZE, 5);
    explain_checks::constant_model(&model, &phantom(4), AttentionMode::Hard).unwrap();
}

#[test]
fn map_is_constant_on_each_superpixel() {
    let model = randomized_model(SIZE, 6);
    let e = explanation_map(&model, &phantom(5), 24, AttentionMode::Soft).unwrap();
    let dense = e.dense();
    for members in e.superpixels.members() {
        let first = &dense[members[0] * 24..members[0] * 24 + 24];
        for &p in &members {
            assert_eq!(&dense[p * 24..p * 24 + 24], first);
        }
    }
    // spot check the indexed accessor against the dense layout
    let (y, x) = (7, 19);
    for r in 0..6 {
        for c in 0..4 {
            assert_eq!(e.value(y, x, r, c), dense[(y * SIZE + x) * 24 + r * 4 + c]);
        }
    }
}

/// Explanation with hand-set deltas: only superpixel `hot` lowers the
/// predicted class in every region.
fn hand_made(hot: usize, pred: &BrixiaScore) -> ExplanationMap {
    let img = phantom(6);
    let sp = extract_superpixels(&img, 12, DEFAULT_COMPACTNESS).unwrap();
    let model = randomized_model(SIZE, 1);
    let mut e = explain_with(&model, &img, &sp, AttentionMode::Soft).unwrap();
    for (i, d) in e.deltas.iter_mut().enumerate() {
        for r in 0..6 {
            for c in 0..4 {
                let k = pred.cells()[r] as usize;
                d[r * 4 + c] = if c == k {
                    if i == hot {
                        -0.3
                    } else {
                        0.05
                    }
                } else {
                    0.0
                };
            }
        }
    }
    e
}

#[test]
fn only_the_supportive_superpixel_is_coloured() {
    let pred = BrixiaScore::new([0, 1, 2, 3, 1, 2]).unwrap();
    let hot = 5;
    let e = hand_made(hot, &pred);
    let rgb = render_rgb(&e, &pred);
    assert_eq!(rgb.len(), SIZE * SIZE * 3);
    let r = supportiveness(&e, &pred);
    for y in 0..SIZE {
        for x in 0..SIZE {
            let p = y * SIZE + x;
            let px = &rgb[p * 3..p * 3 + 3];
            if e.superpixels.label(y, x) as usize == hot {
                assert!((r[p] - 0.3).abs() < 1e-7);
                // maximal supportiveness renders the full class colour
                let class = pred.cells()[pixel_region(y, x, SIZE, SIZE)] as usize;
                assert_eq!(px, CLASS_COLORS[class]);
            } else {
                assert_eq!(px, [255, 255, 255]);
            }
        }
    }
}

#[test]
fn overlay_opacity_scales_with_supportiveness() {
    let pred = BrixiaScore::new([3; 6]).unwrap();
    let mut e = hand_made(0, &pred);
    // superpixel 1 half as supportive as superpixel 0
    for r in 0..6 {
        e.deltas[1][r * 4 + 3] = -0.15;
    }
    let rgb = render_rgb(&e, &pred);
    let labels = e.superpixels.labels();
    let p = labels.iter().position(|&l| l == 1).unwrap();
    // halfway between white and black
    assert!(rgb[p * 3..p * 3 + 3].iter().all(|&c| c == 128 || c == 127));
}

#[test]
fn pixel_regions_pick_the_nearest_band() {
    assert_eq!(pixel_region(0, 0, 100, 100), 0);
    assert_eq!(pixel_region(0, 99, 100, 100), 1);
    assert_eq!(pixel_region(34, 10, 100, 100), 0);
    assert_eq!(pixel_region(35, 10, 100, 100), 2);
    assert_eq!(pixel_region(64, 60, 100, 100), 3);
    assert_eq!(pixel_region(65, 60, 100, 100), 5);
    assert_eq!(pixel_region(99, 10, 100, 100), 4);
}

#[test]
fn png_and_csv_outputs() {
    let model = randomized_model(SIZE, 2);
    let e = explanation_map(&model, &phantom(8), 10, AttentionMode::Hard).unwrap();
    let pred = predict_score(&e.p0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("overlay.png");
    render_explanation(&e, &pred, &path).unwrap();

    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (SIZE as u32, SIZE as u32));
    assert_eq!(info.color_type, png::ColorType::Rgb);
    assert_eq!(info.bit_depth, png::BitDepth::Eight);
    assert_eq!(&buf[..info.buffer_size()], render_rgb(&e, &pred).as_slice());

    let csv = e.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("superpixel_id,region,class,delta"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), e.superpixels.count() * 24);
    for (j, row) in rows.iter().enumerate() {
        let (i, r, c) = (j / 24, j % 24 / 4, j % 4);
        assert_eq!(row[0].parse::<usize>().unwrap(), i);
        assert_eq!(row[1], ["A", "D", "B", "E", "C", "F"][r]);
        assert_eq!(row[2].parse::<usize>().unwrap(), c);
        assert_eq!(row[3].parse::<f32>().unwrap(), e.deltas[i][r * 4 + c]);
    }
}

#[test]
fn size_mismatch_is_rejected() {
    let model = randomized_model(SIZE, 2);
    let sp = extract_superpixels(&GrayImage::filled(16, 16, 0.5), 4, DEFAULT_COMPACTNESS).unwrap();
    assert!(explain_with(&model, &phantom(1), &sp, AttentionMode::Hard).is_err());
}
