mod common;

use bagcams::metrics::{evaluate, extract_box, gt_known_loc, maxboxaccv2, piou, pxap, top1_loc, BBox, GroundTruth};
use proptest::prelude::*;

fn gt(width: usize, height: usize, mask: Vec<bool>) -> GroundTruth {
    let bbox = BBox::of_mask(&mask, width).unwrap();
    GroundTruth { width, height, mask: Some(mask), boxes: vec![bbox], class: 0 }
}

#[test]
fn perfect_maps_score_one() {
    let mut r = common::rng(1);
    let (_, gts) = common::metric_fixture(&mut r, 6, 7, 5);
    let maps: Vec<Vec<f64>> =
        gts.iter().map(|g| g.mask.as_ref().unwrap().iter().map(|&m| m as u8 as f64).collect()).collect();
    assert_eq!(piou(&maps, &gts).unwrap(), 1.0);
    assert_eq!(pxap(&maps, &gts).unwrap(), 1.0);
}

#[test]
fn constant_map_pxap_is_prevalence() {
    // 10 images of 10x10 with exactly 30 positive pixels each
    let gts: Vec<GroundTruth> = (0..10).map(|s| gt(10, 10, (0..100).map(|i| (i + 7 * s) % 10 < 3).collect())).collect();
    let maps = vec![vec![0.5; 100]; 10];
    assert!((pxap(&maps, &gts).unwrap() - 0.30).abs() <= 1e-9);
}

#[test]
fn pixel_metrics_match_brute_force() {
    let mut r = common::rng(2);
    for images in 1..=8 {
        for _ in 0..5 {
            let (maps, gts) = common::metric_fixture(&mut r, images, 6, 5);
            assert!((pxap(&maps, &gts).unwrap() - common::brute_pxap(&maps, &gts)).abs() <= 1e-9);
            assert!((piou(&maps, &gts).unwrap() - common::brute_piou(&maps, &gts)).abs() <= 1e-9);
        }
    }
}

#[test]
fn piou_peak_example() {
    let gts = vec![gt(2, 2, vec![true, true, false, false])];
    let maps = vec![vec![0.9, 0.2, 0.6, 0.1]];
    // thresholds: {0.9}: 1/2, {0.9,0.6}: 1/3, {0.9,0.6,0.2}: 2/3, all: 1/2
    assert!((piou(&maps, &gts).unwrap() - 2.0 / 3.0).abs() <= 1e-12);
}

/// Box accuracy at one threshold, straight from the definition.
fn brute_box_hits(map: &[f64], g: &GroundTruth, tau: f64, delta: f64) -> bool {
    let b = extract_box(map, g.width, g.height, tau);
    g.boxes.iter().any(|gb| b.iou(gb) >= delta)
}

fn taus(maps: &[Vec<f64>]) -> Vec<f64> {
    let mut t: Vec<f64> = maps.iter().flatten().cloned().filter(|v| (0.0..=1.0).contains(v)).collect();
    t.push(0.0);
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

#[test]
fn box_metrics_match_brute_force() {
    let mut r = common::rng(3);
    for images in 1..=6 {
        for _ in 0..4 {
            let (maps, gts) = common::metric_fixture(&mut r, images, 6, 6);
            let taus = taus(&maps);
            // box extraction is a step function of τ that changes only at map values
            let mut best = 0.0f64;
            for &t in &taus {
                let mean: f64 = [0.3, 0.5, 0.7]
                    .iter()
                    .map(|&d| {
                        maps.iter().zip(&gts).filter(|(m, g)| brute_box_hits(m, g, t, d)).count() as f64 / images as f64
                    })
                    .sum::<f64>()
                    / 3.0;
                best = best.max(mean);
            }
            assert!((maxboxaccv2(&maps, &gts).unwrap() - best).abs() <= 1e-12);

            let hits =
                maps.iter().zip(&gts).filter(|(m, g)| taus.iter().any(|&t| brute_box_hits(m, g, t, 0.5))).count();
            assert!((gt_known_loc(&maps, &gts, 0.5).unwrap() - hits as f64 / images as f64).abs() <= 1e-12);
        }
    }
}

#[test]
fn top1_requires_the_right_class() {
    let g = gt(4, 4, (0..16).map(|i| i % 4 < 2).collect());
    let map: Vec<f64> = g.mask.as_ref().unwrap().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let maps = vec![map.clone(), map];
    let gts = vec![g.clone(), g];
    assert_eq!(gt_known_loc(&maps, &gts, 0.5).unwrap(), 1.0);
    assert_eq!(top1_loc(&maps, &gts, &[0, 1], 0.5).unwrap(), 0.5);
    assert!(top1_loc(&maps, &gts, &[0], 0.5).is_err());
}

#[test]
fn extract_box_takes_the_largest_component() {
    #[rustfmt::skip]
    let map = vec![
        0.9, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.8, 0.8, 0.0,
        0.0, 0.0, 0.8, 0.8, 0.0,
        0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    assert_eq!(extract_box(&map, 5, 4, 0.5), BBox::new(2, 1, 3, 2));
    assert_eq!(extract_box(&map, 5, 4, 0.85), BBox::new(0, 0, 0, 0));
    // nothing above τ: the argmax pixel
    assert_eq!(extract_box(&map, 5, 4, 0.95), BBox::new(0, 0, 0, 0));
}

#[test]
fn empty_inputs_and_missing_masks_are_errors() {
    assert!(pxap(&[], &[]).is_err());
    let g = GroundTruth { width: 2, height: 1, mask: None, boxes: vec![BBox::new(0, 0, 0, 0)], class: 0 };
    assert!(pxap(&[vec![0.0, 1.0]], std::slice::from_ref(&g)).is_err());
    assert!(maxboxaccv2(&[vec![0.0, 1.0]], &[g]).is_ok());
    let no_pos = gt(2, 1, vec![true, false]);
    let no_pos = GroundTruth { mask: Some(vec![false, false]), ..no_pos };
    assert!(pxap(&[vec![0.0, 1.0]], &[no_pos]).is_err());
}

fn fixture_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<GroundTruth>)> {
    (1usize..=4, any::<u64>()).prop_map(|(images, seed)| {
        let mut r = common::rng(seed);
        common::metric_fixture(&mut r, images, 5, 4)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_are_invariant_under_increasing_transforms((maps, gts) in fixture_strategy(), power in 0.2f64..5.0) {
        let moved: Vec<Vec<f64>> = maps.iter().map(|m| m.iter().map(|v| v.powf(power)).collect()).collect();
        let predicted = vec![0; maps.len()];
        prop_assert_eq!(evaluate(&maps, &gts, &predicted).unwrap(), evaluate(&moved, &gts, &predicted).unwrap());
    }

    #[test]
    fn pixel_scores_ignore_image_order((maps, gts) in fixture_strategy(), shift in 0usize..4) {
        let n = maps.len();
        let rot = |i: usize| (i + shift) % n;
        let maps2: Vec<Vec<f64>> = (0..n).map(|i| maps[rot(i)].clone()).collect();
        let gts2: Vec<GroundTruth> = (0..n).map(|i| gts[rot(i)].clone()).collect();
        prop_assert!((pxap(&maps, &gts).unwrap() - pxap(&maps2, &gts2).unwrap()).abs() <= 1e-12);
        prop_assert!((piou(&maps, &gts).unwrap() - piou(&maps2, &gts2).unwrap()).abs() <= 1e-12);
        prop_assert!((maxboxaccv2(&maps, &gts).unwrap() - maxboxaccv2(&maps2, &gts2).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn scores_lie_in_the_unit_interval((maps, gts) in fixture_strategy()) {
        let s = evaluate(&maps, &gts, &vec![0; maps.len()]).unwrap();
        for v in [s.t_loc, s.g_loc, s.b_loc, s.piou, s.pxap] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
