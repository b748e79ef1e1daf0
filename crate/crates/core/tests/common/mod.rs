//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use bagcams::metrics::{BBox, GroundTruth};
use bagcams::model::{InputShape, Layer, Network, NetworkSpec};
use bagcams::tensor::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entrywise error with an absolute floor: differences up to `1e-9` count as
/// exact, larger ones are measured relative to the bigger magnitude.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, 1e-9)
}

pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d <= floor {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

pub fn max_rel_err_floor(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err_floor(*x, *y, floor)).fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// gradient oracle

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> bagcams::tensor::Result<NodeId>>;

pub struct OpCase {
    pub inputs: Vec<Tensor>,
    build: Build,
}

/// Values bounded away from zero so a relu never sees a kink under FD.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced at least 0.05 apart so pooling windows have a clear winner.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        levels.swap(i, j);
    }
    Tensor::new(shape.to_vec(), levels).unwrap()
}

pub const OPS: [&str; 14] = [
    "conv2d",
    "relu",
    "max_pool2d",
    "global_avg_pool",
    "linear",
    "add",
    "mul",
    "matmul",
    "log",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "sum",
    "pick",
];

pub fn op_case(op: &str, rng: &mut ChaCha8Rng) -> OpCase {
    let r = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.random_range(lo..=hi);
    match op {
        "conv2d" => {
            let (c, o, k) = (r(rng, 1, 3), r(rng, 1, 3), r(rng, 1, 3));
            let (stride, pad) = (r(rng, 1, 2), r(rng, 0, 1));
            let (h, w) = (r(rng, k, 6), r(rng, k, 6));
            OpCase {
                inputs: vec![
                    uniform(rng, &[c, h, w], -1.0, 1.0),
                    uniform(rng, &[o, c, k, k], -1.0, 1.0),
                    uniform(rng, &[o], -1.0, 1.0),
                ],
                build: Box::new(move |g, x| g.conv2d(x[0], x[1], x[2], stride, pad)),
            }
        }
        "relu" => {
            let shape = [r(rng, 1, 3), r(rng, 1, 5), r(rng, 1, 5)];
            OpCase { inputs: vec![away_from_zero(rng, &shape)], build: Box::new(|g, x| g.relu(x[0])) }
        }
        "max_pool2d" => {
            let size = r(rng, 2, 3);
            let shape = [r(rng, 1, 3), r(rng, size, 3 * size), r(rng, size, 3 * size)];
            OpCase { inputs: vec![spaced(rng, &shape)], build: Box::new(move |g, x| g.max_pool2d(x[0], size)) }
        }
        "global_avg_pool" => {
            let shape = [r(rng, 1, 4), r(rng, 1, 5), r(rng, 1, 5)];
            OpCase { inputs: vec![uniform(rng, &shape, -2.0, 2.0)], build: Box::new(|g, x| g.global_avg_pool(x[0])) }
        }
        "linear" => {
            let (c, k) = (r(rng, 1, 6), r(rng, 1, 4));
            OpCase {
                inputs: vec![
                    uniform(rng, &[c], -1.0, 1.0),
                    uniform(rng, &[k, c], -1.0, 1.0),
                    uniform(rng, &[k], -1.0, 1.0),
                ],
                build: Box::new(|g, x| g.linear(x[0], x[1], x[2])),
            }
        }
        "add" | "mul" => {
            let shape = [r(rng, 1, 4), r(rng, 1, 4)];
            let inputs = vec![uniform(rng, &shape, -2.0, 2.0), uniform(rng, &shape, -2.0, 2.0)];
            let build: Build =
                if op == "add" { Box::new(|g, x| g.add(x[0], x[1])) } else { Box::new(|g, x| g.mul(x[0], x[1])) };
            OpCase { inputs, build }
        }
        "matmul" => {
            let (m, k, n) = (r(rng, 1, 4), r(rng, 1, 4), r(rng, 1, 4));
            OpCase {
                inputs: vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)],
                build: Box::new(|g, x| g.matmul(x[0], x[1])),
            }
        }
        "log" => {
            let shape = [r(rng, 1, 8)];
            OpCase { inputs: vec![uniform(rng, &shape, 0.3, 3.0)], build: Box::new(|g, x| g.log(x[0])) }
        }
        "softmax" | "log_softmax" => {
            let shape = [r(rng, 2, 6)];
            let inputs = vec![uniform(rng, &shape, -3.0, 3.0)];
            let build: Build =
                if op == "softmax" { Box::new(|g, x| g.softmax(x[0])) } else { Box::new(|g, x| g.log_softmax(x[0])) };
            OpCase { inputs, build }
        }
        "cross_entropy" => {
            let k = r(rng, 2, 6);
            let label = rng.random_range(0..k);
            OpCase {
                inputs: vec![uniform(rng, &[k], -3.0, 3.0)],
                build: Box::new(move |g, x| g.cross_entropy(x[0], label)),
            }
        }
        "sum" => {
            let shape = [r(rng, 1, 3), r(rng, 1, 4)];
            OpCase { inputs: vec![uniform(rng, &shape, -2.0, 2.0)], build: Box::new(|g, x| g.sum(x[0])) }
        }
        "pick" => {
            let n = r(rng, 1, 8);
            let index = rng.random_range(0..n);
            OpCase { inputs: vec![uniform(rng, &[n], -2.0, 2.0)], build: Box::new(move |g, x| g.pick(x[0], index)) }
        }
        other => panic!("no case for op {}", other),
    }
}

impl OpCase {
    /// `sum(op(inputs) * weights)`, with the weights built on the first call.
    fn scalar(&self, inputs: &[Tensor], weights: &Tensor) -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = (self.build)(&mut g, &ids).unwrap();
        let out_data = g.value(out).data().to_vec();
        out_data.iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    }

    /// Largest entrywise error between backward and central differences.
    pub fn check(&self, rng: &mut ChaCha8Rng) -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = (self.build)(&mut g, &ids).unwrap();
        let shape = g.value(out).shape().to_vec();
        let weights = uniform(rng, &shape, -1.0, 1.0);
        let w = g.leaf(weights.clone());
        let weighted = g.mul(out, w).unwrap();
        let loss = g.sum(weighted).unwrap();
        let grads = g.backward(loss).unwrap();

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (slot, id) in ids.iter().enumerate() {
            let analytic = grads.get_or_zeros(*id, self.inputs[slot].shape());
            let mut probe = self.inputs.clone();
            for j in 0..probe[slot].len() {
                let orig = probe[slot].data()[j];
                probe[slot].data_mut()[j] = orig + h;
                let up = self.scalar(&probe, &weights);
                probe[slot].data_mut()[j] = orig - h;
                let down = self.scalar(&probe, &weights);
                probe[slot].data_mut()[j] = orig;
                worst = worst.max(rel_err(analytic.data()[j], (up - down) / (2.0 * h)));
            }
        }
        worst
    }
}

/// Max error per op over `instances` random cases each.
pub fn gradient_oracle(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng(seed);
    OPS.iter()
        .map(|&op| {
            let worst = (0..instances).map(|_| op_case(op, &mut rng).check(&mut rng)).fold(0.0, f64::max);
            (op, worst)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// small networks

fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Layer {
    Layer::Conv { in_ch, out_ch, kernel, stride, pad }
}

/// conv+relu, maxpool, conv+relu on a 3x8x8 input; captures `input`,
/// `block1` (4x4x4) and `final` (5x4x4).
pub fn random_net(seed: u64, classes: usize) -> Network {
    let spec = NetworkSpec {
        input: InputShape { channels: 3, height: 8, width: 8 },
        input_offset: 0.5,
        input_scale: 2.0,
        layers: vec![conv(3, 4, 3, 1, 1), Layer::Relu, Layer::MaxPool { size: 2 }, conv(4, 5, 3, 1, 1), Layer::Relu],
        classes,
    };
    Network::init(spec, seed).unwrap()
}

/// conv+relu then a linear conv on a 2x4x4 input: everything downstream of
/// `block1` (C=4, N=16) is smooth, so nested finite differences are accurate.
pub fn smooth_tail_net(seed: u64, classes: usize) -> Network {
    let spec = NetworkSpec {
        input: InputShape { channels: 2, height: 4, width: 4 },
        input_offset: 0.0,
        input_scale: 1.0,
        layers: vec![conv(2, 4, 3, 1, 1), Layer::Relu, conv(4, 3, 3, 1, 1)],
        classes,
    };
    Network::init(spec, seed).unwrap()
}

pub fn random_image(net: &Network, rng: &mut ChaCha8Rng) -> Tensor {
    let i = net.spec().input;
    uniform(rng, &[i.channels, i.height, i.width], 0.0, 1.0)
}

// ---------------------------------------------------------------------------
// regional localizer oracle

fn softmax_at(scores: &[f64], k: usize) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    (scores[k] - m).exp() / total
}

/// Base score from a plain forward pass: the logit, or the class probability.
pub fn base_score(net: &Network, layer: &str, z: &Tensor, class: usize, probability: bool) -> f64 {
    let s = net.scores_from_features(layer, z).unwrap();
    if probability {
        softmax_at(&s, class)
    } else {
        s[class]
    }
}

/// Five-point central difference of `f` at `x` along one coordinate.
fn five_point(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

/// Coarse map `P_m = sum_c Z_{c,m} dS/dZ_{c,m}` with the gradient itself taken
/// by finite differences of forward passes.
pub fn fd_coarse(net: &Network, layer: &str, z: &Tensor, class: usize, probability: bool, h: f64) -> Vec<f64> {
    let shape = z.shape();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let mut probe = z.clone();
    let mut out = vec![0.0; n];
    for j in 0..c * n {
        let orig = probe.data()[j];
        let d = five_point(
            |v| {
                probe.data_mut()[j] = v;
                base_score(net, layer, &probe, class, probability)
            },
            orig,
            h,
        );
        probe.data_mut()[j] = orig;
        out[j % n] += orig * d;
    }
    out
}

/// `entry[(m * N + n) * C + c] = dP_m / dZ_{c,n}` by nested finite differences.
pub fn fd_localizers(net: &Network, layer: &str, z: &Tensor, class: usize, probability: bool) -> Vec<f64> {
    let (inner, outer) = (1e-3, 3e-3);
    let shape = z.shape();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let mut out = vec![0.0; n * n * c];
    let mut probe = z.clone();
    for j in 0..c * n {
        let (ch, pos) = (j / n, j % n);
        let orig = probe.data()[j];
        let mut at = |v: f64| {
            probe.data_mut()[j] = v;
            fd_coarse(net, layer, &probe, class, probability, inner)
        };
        let (p1, m1, p2, m2) = (at(orig + outer), at(orig - outer), at(orig + 2.0 * outer), at(orig - 2.0 * outer));
        probe.data_mut()[j] = orig;
        for m in 0..n {
            out[(m * n + pos) * c + ch] = (8.0 * (p1[m] - m1[m]) - (p2[m] - m2[m])) / (12.0 * outer);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// metric oracles

/// Pooled (score, positive) pixels.
fn pooled(maps: &[Vec<f64>], gts: &[GroundTruth]) -> Vec<(f64, bool)> {
    maps.iter().zip(gts).flat_map(|(m, g)| m.iter().cloned().zip(g.mask.as_ref().unwrap().iter().cloned())).collect()
}

fn thresholds(px: &[(f64, bool)]) -> Vec<f64> {
    let mut t: Vec<f64> = px.iter().map(|p| p.0).collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Max over thresholds of `|pred ∩ gt| / |pred ∪ gt|` with `pred = map ≥ t`.
pub fn brute_piou(maps: &[Vec<f64>], gts: &[GroundTruth]) -> f64 {
    let px = pooled(maps, gts);
    let mut best: f64 = 0.0;
    for t in thresholds(&px) {
        let inter = px.iter().filter(|p| p.0 >= t && p.1).count();
        let union = px.iter().filter(|p| p.0 >= t || p.1).count();
        if union > 0 {
            best = best.max(inter as f64 / union as f64);
        }
    }
    best
}

/// Step-wise area under the precision-recall curve, one point per threshold.
pub fn brute_pxap(maps: &[Vec<f64>], gts: &[GroundTruth]) -> f64 {
    let px = pooled(maps, gts);
    let positives = px.iter().filter(|p| p.1).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds(&px) {
        let predicted = px.iter().filter(|p| p.0 >= t).count() as f64;
        let tp = px.iter().filter(|p| p.0 >= t && p.1).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    ap
}

/// Random fixture of `images` maps on `w x h` with random masks; map values
/// are drawn from a small set so ties occur.
pub fn metric_fixture(rng: &mut ChaCha8Rng, images: usize, w: usize, h: usize) -> (Vec<Vec<f64>>, Vec<GroundTruth>) {
    let mut maps = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let map: Vec<f64> = (0..w * h).map(|_| rng.random_range(0..8) as f64 / 7.0).collect();
        let mut mask: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.35)).collect();
        if !mask.iter().any(|&m| m) {
            mask[0] = true;
        }
        let bbox = BBox::of_mask(&mask, w).unwrap();
        maps.push(map);
        gts.push(GroundTruth { width: w, height: h, mask: Some(mask), boxes: vec![bbox], class: 0 });
    }
    (maps, gts)
}
