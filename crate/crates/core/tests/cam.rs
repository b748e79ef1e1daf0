mod common;

use bagcams::cam::{
    bag_combine, bagcams_closed, bagcams_exact_at, cam_project, gradcam, gradcam_pp, normalize_map, pcs,
    rlg_localizers_at, CoefficientScheme, FeatureCapture, NormalizeMode, RegionalLocalizerSet, RlgOptions,
    ScoreTransform, EXACT_STEP,
};
use bagcams::error::Error;
use bagcams::localize::{localize, LocalizeOptions, Method};
use bagcams::model::{InputShape, Layer, Network, NetworkSpec};
use bagcams::tensor::Tensor;
use common::{max_abs_diff, max_rel_err_floor, random_image, random_net, rng, smooth_tail_net};

fn capture(net: &Network, image: &Tensor, layer: &str, class: usize, t: ScoreTransform) -> FeatureCapture {
    net.forward_capture(image, layer).unwrap().capture(class, t).unwrap()
}

fn features(net: &Network, image: &Tensor, layer: &str) -> Tensor {
    net.forward_capture(image, layer).unwrap().features().clone()
}

fn zg(cap: &FeatureCapture, c: usize, n: usize) -> (f64, f64) {
    let idx = c * cap.positions() + n;
    (cap.z[idx], cap.grad[idx])
}

#[test]
fn gradcam_matches_loop_oracle() {
    let mut r = rng(1);
    for seed in 0..6 {
        let net = random_net(seed, 3);
        let image = random_image(&net, &mut r);
        for layer in ["input", "block1", "final"] {
            for class in 0..3 {
                let cap = capture(&net, &image, layer, class, ScoreTransform::Identity);
                let n = cap.positions();
                let mut expect = vec![0.0; n];
                for (i, e) in expect.iter_mut().enumerate() {
                    for m in 0..n {
                        for c in 0..cap.channels {
                            *e += zg(&cap, c, m).1 * zg(&cap, c, i).0 / n as f64;
                        }
                    }
                }
                assert!(max_abs_diff(&gradcam(&cap).values, &expect) <= 1e-9);
            }
        }
    }
}

#[test]
fn gradcam_pp_matches_loop_oracle() {
    let mut r = rng(2);
    for seed in 0..6 {
        let net = random_net(seed, 3);
        let image = random_image(&net, &mut r);
        for layer in ["input", "block1", "final"] {
            let cap = capture(&net, &image, layer, seed as usize % 3, ScoreTransform::Identity);
            let (c_n, n) = (cap.channels, cap.positions());
            let mut alpha = vec![0.0; n];
            for (m, a) in alpha.iter_mut().enumerate() {
                for c in 0..c_n {
                    let total: f64 = (0..n).map(|p| zg(&cap, c, p).0).sum();
                    let g = zg(&cap, c, m).1;
                    let denom = 2.0 * g.powi(2) + total * g.powi(3);
                    if denom != 0.0 {
                        *a += g.powi(2) / denom / c_n as f64;
                    }
                }
            }
            let mut expect = vec![0.0; n];
            for c in 0..c_n {
                let w: f64 = (0..n).map(|m| alpha[m] * zg(&cap, c, m).1).sum();
                for (i, e) in expect.iter_mut().enumerate() {
                    *e += w.max(0.0) * zg(&cap, c, i).0;
                }
            }
            assert!(max_abs_diff(&gradcam_pp(&cap).values, &expect) <= 1e-9);
        }
    }
}

#[test]
fn gradcam_pp_uniform_gradient_is_proportional_to_gradcam() {
    let z = vec![1.0, 2.0, 0.5, 3.0, 0.0, 1.0];
    let grad = vec![0.4, 0.4, 0.4, 0.7, 0.7, 0.7];
    let cap = FeatureCapture::new(2, 1, 3, z, grad, 0, 1.0, ScoreTransform::Identity).unwrap();
    let a = gradcam_pp(&cap).values;
    let b = gradcam(&cap).values;
    let ratio = a[0] / b[0];
    for (x, y) in a.iter().zip(&b) {
        assert!((x - ratio * y).abs() <= 1e-12);
    }
    let zero = FeatureCapture::new(2, 1, 3, vec![1.0; 6], vec![0.0; 6], 0, 1.0, ScoreTransform::Identity).unwrap();
    assert_eq!(gradcam_pp(&zero).values, vec![0.0; 3]);
}

#[test]
fn classifier_identity_at_final_layer() {
    let mut r = rng(3);
    for seed in 0..5 {
        let net = random_net(seed, 4);
        let image = random_image(&net, &mut r);
        let z = features(&net, &image, "final");
        let n = z.shape()[1] * z.shape()[2];
        for class in 0..4 {
            let cap = capture(&net, &image, "final", class, ScoreTransform::Identity);
            let lhs: f64 = cap.grad.iter().zip(&cap.z).map(|(g, z)| g * z).sum();
            let c = cap.channels;
            let rhs: f64 = (0..c)
                .map(|ch| {
                    net.head_weight().data()[class * c + ch] * z.data()[ch * n..(ch + 1) * n].iter().sum::<f64>()
                        / n as f64
                })
                .sum();
            assert!((lhs - rhs).abs() <= 1e-9, "{} vs {}", lhs, rhs);
        }
    }
}

#[test]
fn final_layer_gradcam_pcs_and_cam_coincide() {
    let mut r = rng(4);
    for seed in 0..5 {
        let net = random_net(seed, 3);
        let image = random_image(&net, &mut r);
        let z = features(&net, &image, "final");
        let n = (z.shape()[1] * z.shape()[2]) as f64;
        let cam = cam_project(net.head_weight(), &z).unwrap();
        for class in 0..3 {
            let cap = capture(&net, &image, "final", class, ScoreTransform::Identity);
            let g = gradcam(&cap);
            let p = pcs(&cap);
            let scaled: Vec<f64> = cam.row(class).iter().map(|v| v / n).collect();
            assert!(max_abs_diff(&g.values, &p.values) <= 1e-9);
            assert!(max_abs_diff(&g.values, &scaled) <= 1e-9);
            let ng = normalize_map(&g, NormalizeMode::MinMax);
            let nc = normalize_map(&cam.select_row(class), NormalizeMode::MinMax);
            assert!(max_abs_diff(&ng.values, &nc.values) <= 1e-9);
        }
    }
}

#[test]
fn closed_form_factors_into_scale_times_pcs() {
    let mut r = rng(5);
    for seed in 0..12 {
        let net = random_net(100 + seed, 3);
        let image = random_image(&net, &mut r);
        for layer in ["input", "block1", "final"] {
            let cap = capture(&net, &image, layer, seed as usize % 3, ScoreTransform::LogSoftmax);
            let (c, n) = (cap.channels, cap.positions());
            let mut dot = 0.0;
            for i in 0..c * n {
                dot += cap.grad[i] * cap.z[i];
            }
            let lambda = cap.score * ((n * c) as f64 + dot);
            let base: Vec<f64> = (0..n).map(|i| (0..c).map(|ch| zg(&cap, ch, i).0 * zg(&cap, ch, i).1).sum()).collect();
            let closed = bagcams_closed(&cap).unwrap();
            let scaled: Vec<f64> = base.iter().map(|v| lambda * v).collect();
            assert!(max_abs_diff(&closed.values, &scaled) <= 1e-9);
            if lambda > 0.0 {
                let a = normalize_map(&closed, NormalizeMode::MinMax).values;
                let b = normalize_map(&pcs(&cap), NormalizeMode::MinMax).values;
                for i in 0..n {
                    for j in 0..n {
                        assert_eq!(a[i].total_cmp(&a[j]), b[i].total_cmp(&b[j]), "rank order differs at {} {}", i, j);
                    }
                }
            }
        }
    }
}

#[test]
fn closed_form_example() {
    // two positions, one class; log-gradients with g*Z = [1/3, 0; 1, -1/3]
    let z = vec![1.0, 3.0, 0.0, 2.0];
    let grad = vec![1.0 / 3.0, 0.0, 0.0, -1.0 / 6.0];
    let cap = FeatureCapture::new(2, 1, 2, z, grad, 0, 3.0, ScoreTransform::Log).unwrap();
    let m = bagcams_closed(&cap).unwrap();
    // outer sum: 3 * (4 + 1/3 - 1/3) = 12; pcs = [1/3, -1/3]
    assert!(max_abs_diff(&m.values, &[4.0, -4.0]) <= 1e-12);
    let zero = FeatureCapture::new(2, 1, 2, vec![1.0; 4], vec![0.0; 4], 0, 3.0, ScoreTransform::Log).unwrap();
    assert_eq!(bagcams_closed(&zero).unwrap().values, vec![0.0, 0.0]);
    let ident = FeatureCapture::new(2, 1, 2, vec![1.0; 4], vec![0.0; 4], 0, 3.0, ScoreTransform::Identity).unwrap();
    assert!(bagcams_closed(&ident).is_err());
}

#[test]
fn regional_localizers_match_nested_finite_differences() {
    let mut r = rng(6);
    for seed in 0..3 {
        let net = smooth_tail_net(seed, 3);
        let image = random_image(&net, &mut r);
        for (layer, transform) in [
            ("block1", ScoreTransform::LogSoftmax),
            ("block1", ScoreTransform::Identity),
            ("final", ScoreTransform::LogSoftmax),
        ] {
            let z = features(&net, &image, layer);
            let class = seed as usize % 3;
            let set = rlg_localizers_at(&net, layer, &z, class, transform, RlgOptions::default()).unwrap();
            let oracle = common::fd_localizers(&net, layer, &z, class, transform == ScoreTransform::LogSoftmax);
            // entries reach ~1e-2; differences below 1e-10 are oracle noise
            let err = max_rel_err_floor(&set.data, &oracle, 1e-10);
            assert!(err <= 1e-4, "{} {:?}: {:e}", layer, transform, err);
        }
    }
}

#[test]
fn identity_transform_localizers_collapse_to_the_diagonal() {
    let mut r = rng(7);
    for seed in 0..4 {
        let net = random_net(seed, 3);
        let image = random_image(&net, &mut r);
        let z = features(&net, &image, "final");
        let (c, n) = (z.shape()[0], z.shape()[1] * z.shape()[2]);
        let set = rlg_localizers_at(&net, "final", &z, 1, ScoreTransform::Identity, RlgOptions::default()).unwrap();
        assert!(set.max_off_diagonal() <= 1e-6);
        for m in 0..n {
            for ch in 0..c {
                let w = net.head_weight().data()[c + ch] / n as f64;
                assert!((set.entry(m, m, 0, ch) - w).abs() <= 1e-6);
            }
        }
        let exact = bagcams_exact_at(&net, "final", &z, 1, ScoreTransform::Identity, EXACT_STEP).unwrap();
        let cap = capture(&net, &image, "final", 1, ScoreTransform::Identity);
        assert!(max_abs_diff(&exact.values, &pcs(&cap).values) <= 1e-6);
        let grouped = bag_combine(&set, z.data(), z.shape()[1], z.shape()[2], &CoefficientScheme::Grouping).unwrap();
        assert!(max_abs_diff(&grouped.values, &pcs(&cap).values) <= 1e-6);

        // the localizers of a head linear in Z do not depend on Z
        let other = common::uniform(&mut r, z.shape(), 0.0, 2.0);
        let moved =
            rlg_localizers_at(&net, "final", &other, 1, ScoreTransform::Identity, RlgOptions::default()).unwrap();
        assert!(max_abs_diff(&set.data, &moved.data) <= 1e-6);
    }
}

#[test]
fn exact_route_equals_grouped_bagging_of_localizers() {
    let mut r = rng(8);
    for seed in 0..4 {
        let net = random_net(200 + seed, 3);
        let image = random_image(&net, &mut r);
        for layer in ["block1", "final"] {
            let z = features(&net, &image, layer);
            let (h, w) = (z.shape()[1], z.shape()[2]);
            for transform in [ScoreTransform::LogSoftmax, ScoreTransform::Identity] {
                let set = rlg_localizers_at(&net, layer, &z, 2, transform, RlgOptions::default()).unwrap();
                let bagged = bag_combine(&set, z.data(), h, w, &CoefficientScheme::Grouping).unwrap();
                let exact = bagcams_exact_at(&net, layer, &z, 2, transform, EXACT_STEP).unwrap();
                let scale = bagged.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                assert!(max_abs_diff(&bagged.values, &exact.values) <= 1e-6 * scale, "{} {:?}", layer, transform);
            }
        }
    }
}

#[test]
fn custom_grouping_table_reproduces_grouping() {
    let mut r = rng(9);
    let net = random_net(3, 3);
    let image = random_image(&net, &mut r);
    let z = features(&net, &image, "final");
    let (h, w) = (z.shape()[1], z.shape()[2]);
    let set = rlg_localizers_at(&net, "final", &z, 0, ScoreTransform::LogSoftmax, RlgOptions::default()).unwrap();
    let n = h * w;
    let table = CoefficientScheme::Grouping.table(n, None).unwrap();
    let custom = bag_combine(&set, z.data(), h, w, &CoefficientScheme::Custom(table)).unwrap();
    let grouped = bag_combine(&set, z.data(), h, w, &CoefficientScheme::Grouping).unwrap();
    assert!(max_abs_diff(&custom.values, &grouped.values) <= 1e-12);

    let avg_table = CoefficientScheme::UniformAverage.table(n, None).unwrap();
    let custom_avg = bag_combine(&set, z.data(), h, w, &CoefficientScheme::Custom(avg_table)).unwrap();
    let avg = bag_combine(&set, z.data(), h, w, &CoefficientScheme::UniformAverage).unwrap();
    assert!(max_abs_diff(&custom_avg.values, &avg.values) <= 1e-12);

    assert!(bag_combine(&set, z.data(), h, w, &CoefficientScheme::Custom(vec![0.0; 3])).is_err());
}

#[test]
fn zero_localizers_give_zero_maps() {
    let set = RegionalLocalizerSet { positions: 4, channels: 2, classes: vec![0], data: vec![0.0; 32] };
    let z = vec![1.0, 2.0, 3.0, 4.0, 0.5, 0.5, 0.5, 0.5];
    for scheme in [CoefficientScheme::UniformAverage, CoefficientScheme::SpatialAlpha, CoefficientScheme::Grouping] {
        assert_eq!(bag_combine(&set, &z, 2, 2, &scheme).unwrap().values, vec![0.0; 4]);
    }
}

#[test]
fn exact_map_is_permutation_equivariant_at_final_layer() {
    let mut r = rng(10);
    let net = random_net(4, 3);
    let image = random_image(&net, &mut r);
    let z = features(&net, &image, "final");
    let (c, n) = (z.shape()[0], z.shape()[1] * z.shape()[2]);
    let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
    let mut permuted = z.clone();
    for ch in 0..c {
        for i in 0..n {
            permuted.data_mut()[ch * n + i] = z.data()[ch * n + perm[i]];
        }
    }
    let a = bagcams_exact_at(&net, "final", &z, 0, ScoreTransform::LogSoftmax, EXACT_STEP).unwrap();
    let b = bagcams_exact_at(&net, "final", &permuted, 0, ScoreTransform::LogSoftmax, EXACT_STEP).unwrap();
    let unpermuted: Vec<f64> = (0..n).map(|i| b.values[perm.iter().position(|&p| p == i).unwrap()]).collect();
    assert!(max_abs_diff(&a.values, &unpermuted) <= 1e-9);
}

#[test]
fn exact_and_closed_form_differ_on_a_nonlinear_tail() {
    let mut r = rng(11);
    let net = random_net(5, 3);
    let image = random_image(&net, &mut r);
    let z = features(&net, &image, "block1");
    let exact = bagcams_exact_at(&net, "block1", &z, 0, ScoreTransform::LogSoftmax, EXACT_STEP).unwrap();
    let closed = bagcams_closed(&capture(&net, &image, "block1", 0, ScoreTransform::LogSoftmax)).unwrap();
    let a = normalize_map(&exact, NormalizeMode::MinMax).values;
    let b = normalize_map(&closed, NormalizeMode::MinMax).values;
    let norm = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    println!("normalized exact vs closed-form difference at block1: {:.4}", norm);
    assert!(norm.is_finite());
}

#[test]
fn budget_guard_rejects_large_captures() {
    let spec = NetworkSpec {
        input: InputShape { channels: 1, height: 64, width: 64 },
        input_offset: 0.0,
        input_scale: 1.0,
        layers: vec![Layer::Conv { in_ch: 1, out_ch: 17, kernel: 1, stride: 1, pad: 0 }],
        classes: 2,
    };
    let net = Network::init(spec, 0).unwrap();
    let z = Tensor::zeros(&[17, 64, 64]);
    let err = rlg_localizers_at(&net, "final", &z, 0, ScoreTransform::LogSoftmax, RlgOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Budget { cost: 69632, limit: 65536 }), "{}", err);
    assert!(err.to_string().contains("closed-form"));
}

#[test]
fn localize_produces_normalized_maps_at_input_resolution() {
    let mut r = rng(12);
    let net = random_net(6, 3);
    let image = random_image(&net, &mut r);
    for method in Method::ALL {
        for layer in ["block1", "final"] {
            let out = localize(&net, &image, layer, method, Some(1), LocalizeOptions::default());
            if method == Method::Cam && layer != "final" {
                assert!(matches!(out, Err(Error::CamChannels { .. })));
                continue;
            }
            let out = out.unwrap();
            assert_eq!((out.map.height, out.map.width), (8, 8));
            assert!(out.map.values.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(out.class, 1);
        }
    }
    assert!(localize(&net, &image, "block9", Method::Pcs, None, LocalizeOptions::default()).is_err());
    assert!(localize(&net, &image, "final", Method::Pcs, Some(3), LocalizeOptions::default()).is_err());
}
