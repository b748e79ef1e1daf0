//! WSOL evaluation: box extraction, T-Loc, G-Loc, MaxBoxAccV2, pIoU, PxAP.
//!
//! Every threshold sweep is exact: instead of a fixed grid, thresholds are
//! taken at every distinct map value, so scores depend only on the order of
//! map values and are invariant under strictly increasing transforms.
//!
//! Box metrics binarize with `map > τ` for `τ ∈ [0, 1]`; pixel metrics use
//! the level sets `map ≥ v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix0 = self.x0.max(other.x0);
        let iy0 = self.y0.max(other.y0);
        let ix1 = self.x1.min(other.x1);
        let iy1 = self.y1.min(other.y1);
        if ix0 > ix1 || iy0 > iy1 {
            return 0.0;
        }
        let inter = (ix1 - ix0 + 1) * (iy1 - iy0 + 1);
        inter as f64 / (self.area() + other.area() - inter) as f64
    }

    /// Tight box of the set pixels, `None` when empty.
    pub fn of_mask(mask: &[bool], width: usize) -> Option<BBox> {
        let mut out: Option<BBox> = None;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (i % width, i / width);
            out = Some(match out {
                None => BBox::new(x, y, x, y),
                Some(b) => BBox::new(b.x0.min(x), b.y0.min(y), b.x1.max(x), b.y1.max(y)),
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub mask: Option<Vec<bool>>,
    pub boxes: Vec<BBox>,
    pub class: usize,
}

/// Map value in `[0, 1]`, row-major, same dimensions as its ground truth.
pub type Heatmap = Vec<f64>;

fn argmax_index(map: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    best
}

fn point_box(i: usize, width: usize) -> BBox {
    BBox::new(i % width, i / width, i % width, i / width)
}

/// Box of the largest 4-connected component of `map > threshold`.
///
/// Ties in component size go to the component containing the smallest
/// raster index. Empty foreground gives a one-pixel box at the argmax
/// (lowest index among equal maxima).
pub fn extract_box(map: &[f64], width: usize, height: usize, threshold: f64) -> BBox {
    assert_eq!(map.len(), width * height, "map size");
    let fg: Vec<bool> = map.iter().map(|&v| v > threshold).collect();
    let mut label = vec![usize::MAX; map.len()];
    let mut best: Option<(usize, BBox)> = None;
    let mut stack = Vec::new();
    for start in 0..map.len() {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = start;
        stack.push(start);
        let mut size = 0;
        let mut b = point_box(start, width);
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = (p % width, p / width);
            b = BBox::new(b.x0.min(x), b.y0.min(y), b.x1.max(x), b.y1.max(y));
            let mut visit = |q: usize| {
                if fg[q] && label[q] == usize::MAX {
                    label[q] = start;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        // components are discovered in order of their smallest raster index
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, b));
        }
    }
    match best {
        Some((_, b)) => b,
        None => point_box(argmax_index(map), width),
    }
}

/// Box produced for each distinct foreground of `map > τ`, `τ ∈ [0, 1]`.
///
/// Returns `(lower, box)` pairs in decreasing order of `lower`: the box is
/// the answer for every `τ` in `[lower, previous lower)` (the first entry
/// covers up to and including 1).
fn box_schedule(map: &[f64], width: usize, height: usize) -> Vec<(f64, BBox)> {
    let n = map.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));

    let mut parent: Vec<usize> = (0..n).collect();
    let mut size = vec![0usize; n];
    let mut min_idx: Vec<usize> = (0..n).collect();
    let mut bbox: Vec<BBox> = (0..n).map(|i| point_box(i, width)).collect();
    let mut active = vec![false; n];

    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    let better = |sa: usize, ma: usize, sb: usize, mb: usize| sa > sb || (sa == sb && ma < mb);

    let mut out = Vec::new();
    // foreground empty for τ at or above the maximum value
    let top = map[order[0]];
    if top <= 1.0 {
        out.push((top.max(0.0), point_box(argmax_index(map), width)));
    }
    let mut best: Option<usize> = None;
    let mut i = 0;
    while i < n {
        let v = map[order[i]];
        let mut j = i;
        while j < n && map[order[j]] == v {
            let p = order[j];
            active[p] = true;
            size[p] = 1;
            let (x, y) = (p % width, p / width);
            let mut neighbours = [usize::MAX; 4];
            if x > 0 {
                neighbours[0] = p - 1;
            }
            if x + 1 < width {
                neighbours[1] = p + 1;
            }
            if y > 0 {
                neighbours[2] = p - width;
            }
            if y + 1 < height {
                neighbours[3] = p + width;
            }
            let mut root = p;
            for q in neighbours.into_iter().filter(|&q| q != usize::MAX && active[q]) {
                let rq = find(&mut parent, q);
                if rq == root {
                    continue;
                }
                let (big, small) = if size[rq] >= size[root] { (rq, root) } else { (root, rq) };
                parent[small] = big;
                size[big] += size[small];
                min_idx[big] = min_idx[big].min(min_idx[small]);
                let (a, b) = (bbox[big], bbox[small]);
                bbox[big] = BBox::new(a.x0.min(b.x0), a.y0.min(b.y0), a.x1.max(b.x1), a.y1.max(b.y1));
                root = big;
            }
            best = Some(match best {
                None => root,
                Some(b) => {
                    let rb = find(&mut parent, b);
                    if better(size[root], min_idx[root], size[rb], min_idx[rb]) {
                        root
                    } else {
                        rb
                    }
                }
            });
            j += 1;
        }
        // the foreground {≥ v} is `> τ` for τ in [next value, v)
        let next = if j < n { map[order[j]] } else { f64::NEG_INFINITY };
        let lower = next.max(0.0);
        if lower < v.min(1.0) || (v > 1.0 && lower <= 1.0) {
            let r = find(&mut parent, best.expect("active component"));
            out.push((lower, bbox[r]));
        }
        if next < 0.0 {
            break;
        }
        i = j;
    }
    out
}

fn best_iou(b: &BBox, gts: &[BBox]) -> f64 {
    gts.iter().map(|g| b.iou(g)).fold(0.0, f64::max)
}

fn check_inputs(maps: &[Heatmap], gts: &[GroundTruth]) -> Result<()> {
    if maps.len() != gts.len() {
        return Err(Error::Metric(format!("{} maps for {} ground truths", maps.len(), gts.len())));
    }
    if maps.is_empty() {
        return Err(Error::Metric("empty dataset".into()));
    }
    for (i, (m, g)) in maps.iter().zip(gts).enumerate() {
        if m.len() != g.width * g.height {
            return Err(Error::Metric(format!(
                "image {}: map has {} values, expected {}x{}",
                i,
                m.len(),
                g.width,
                g.height
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Metric(format!("image {}: non-finite map value", i)));
        }
    }
    Ok(())
}

fn require_boxes(gts: &[GroundTruth]) -> Result<()> {
    match gts.iter().position(|g| g.boxes.is_empty()) {
        Some(i) => Err(Error::Metric(format!("image {}: no ground-truth boxes", i))),
        None => Ok(()),
    }
}

fn require_masks(gts: &[GroundTruth]) -> Result<Vec<&[bool]>> {
    gts.iter()
        .enumerate()
        .map(|(i, g)| match &g.mask {
            Some(m) if m.len() == g.width * g.height => Ok(m.as_slice()),
            Some(_) => Err(Error::Metric(format!("image {}: mask size mismatch", i))),
            None => Err(Error::Metric(format!("image {}: no ground-truth mask", i))),
        })
        .collect()
}

fn best_box_iou(map: &[f64], gt: &GroundTruth) -> f64 {
    box_schedule(map, gt.width, gt.height).iter().map(|(_, b)| best_iou(b, &gt.boxes)).fold(0.0, f64::max)
}

/// Fraction of images whose best box over all thresholds reaches `iou_thresh`.
pub fn gt_known_loc(maps: &[Heatmap], gts: &[GroundTruth], iou_thresh: f64) -> Result<f64> {
    check_inputs(maps, gts)?;
    require_boxes(gts)?;
    let hits = maps.iter().zip(gts).filter(|(m, g)| best_box_iou(m, g) >= iou_thresh).count();
    Ok(hits as f64 / maps.len() as f64)
}

/// As [`gt_known_loc`], additionally requiring a correct class prediction.
pub fn top1_loc(maps: &[Heatmap], gts: &[GroundTruth], predicted: &[usize], iou_thresh: f64) -> Result<f64> {
    check_inputs(maps, gts)?;
    require_boxes(gts)?;
    if predicted.len() != gts.len() {
        return Err(Error::Metric(format!("{} predictions for {} images", predicted.len(), gts.len())));
    }
    let hits = maps
        .iter()
        .zip(gts)
        .zip(predicted)
        .filter(|((m, g), &p)| p == g.class && best_box_iou(m, g) >= iou_thresh)
        .count();
    Ok(hits as f64 / maps.len() as f64)
}

pub const BOX_IOU_LEVELS: [f64; 3] = [0.3, 0.5, 0.7];

/// Max over a shared threshold of box accuracy averaged across IoU levels
/// 0.3, 0.5 and 0.7.
pub fn maxboxaccv2(maps: &[Heatmap], gts: &[GroundTruth]) -> Result<f64> {
    check_inputs(maps, gts)?;
    require_boxes(gts)?;
    let schedules: Vec<Vec<(f64, usize)>> = maps
        .iter()
        .zip(gts)
        .map(|(m, g)| {
            box_schedule(m, g.width, g.height)
                .into_iter()
                .map(|(lo, b)| {
                    let iou = best_iou(&b, &g.boxes);
                    (lo, BOX_IOU_LEVELS.iter().filter(|&&d| iou >= d).count())
                })
                .collect()
        })
        .collect();

    // each schedule is a step function of τ; candidate thresholds are the
    // interval lower ends, where every step function is left-closed
    let mut taus: Vec<f64> = schedules.iter().flatten().map(|&(lo, _)| lo).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let mut diff = vec![0i64; taus.len() + 1];
    for sched in &schedules {
        // sched is ordered by decreasing lower end
        let mut upper = taus.len();
        for &(lo, hits) in sched {
            let start = taus.partition_point(|&t| t < lo);
            diff[start] += hits as i64;
            diff[upper] -= hits as i64;
            upper = start;
        }
    }
    let mut best = 0;
    let mut acc = 0;
    for d in &diff[..taus.len()] {
        acc += d;
        best = best.max(acc);
    }
    Ok(best as f64 / (BOX_IOU_LEVELS.len() * maps.len()) as f64)
}

/// Pooled pixels sorted by decreasing map value: `(value, is_positive)`.
fn pooled_pixels(maps: &[Heatmap], masks: &[&[bool]]) -> Vec<(f64, bool)> {
    let mut px: Vec<(f64, bool)> =
        maps.iter().zip(masks).flat_map(|(m, k)| m.iter().copied().zip(k.iter().copied())).collect();
    px.sort_by(|a, b| b.0.total_cmp(&a.0));
    px
}

/// Cumulative `(true positives, predicted positives)` at each distinct level.
fn level_counts(px: &[(f64, bool)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let (mut tp, mut pp) = (0, 0);
    let mut i = 0;
    while i < px.len() {
        let v = px[i].0;
        while i < px.len() && px[i].0 == v {
            pp += 1;
            tp += px[i].1 as usize;
            i += 1;
        }
        out.push((tp, pp));
    }
    out
}

/// Peak dataset-pooled IoU between `map ≥ v` and the masks.
pub fn piou(maps: &[Heatmap], gts: &[GroundTruth]) -> Result<f64> {
    check_inputs(maps, gts)?;
    let masks = require_masks(gts)?;
    let px = pooled_pixels(maps, &masks);
    let positives = px.iter().filter(|p| p.1).count();
    Ok(level_counts(&px)
        .into_iter()
        .map(|(tp, pp)| {
            let union = positives + pp - tp;
            if union == 0 {
                0.0
            } else {
                tp as f64 / union as f64
            }
        })
        .fold(0.0, f64::max))
}

/// Area under the pooled pixel precision-recall curve, summed as
/// `Σ (R_j − R_{j−1}) P_j` over levels in decreasing order.
pub fn pxap(maps: &[Heatmap], gts: &[GroundTruth]) -> Result<f64> {
    check_inputs(maps, gts)?;
    let masks = require_masks(gts)?;
    let px = pooled_pixels(maps, &masks);
    let positives = px.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(Error::Metric("no positive pixels in dataset".into()));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (tp, pp) in level_counts(&px) {
        ap += (tp - prev_tp) as f64 / positives as f64 * (tp as f64 / pp as f64);
        prev_tp = tp;
    }
    Ok(ap)
}

/// All five metrics in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub t_loc: f64,
    pub g_loc: f64,
    pub b_loc: f64,
    pub piou: f64,
    pub pxap: f64,
}

pub fn evaluate(maps: &[Heatmap], gts: &[GroundTruth], predicted: &[usize]) -> Result<Scores> {
    Ok(Scores {
        t_loc: top1_loc(maps, gts, predicted, 0.5)?,
        g_loc: gt_known_loc(maps, gts, 0.5)?,
        b_loc: maxboxaccv2(maps, gts)?,
        piou: piou(maps, gts)?,
        pxap: pxap(maps, gts)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub layer: String,
    #[serde(flatten)]
    pub scores: Scores,
    /// Absent where timing would break byte-reproducibility.
    pub seconds_per_image: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Table layout: metrics ×100 with two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,layer,T-Loc,G-Loc,B-Loc,pIoU,PxAP,seconds_per_image\n");
        for r in &self.rows {
            let s = &r.scores;
            let secs = r.seconds_per_image.map(|t| format!("{:.6}", t)).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{}\n",
                r.method,
                r.layer,
                s.t_loc * 100.0,
                s.g_loc * 100.0,
                s.b_loc * 100.0,
                s.piou * 100.0,
                s.pxap * 100.0,
                secs
            ));
        }
        out
    }
}
