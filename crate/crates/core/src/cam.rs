//! Projection of a trained classifier into localization maps.
//!
//! Features are held channel-major, `Z[c * N + n]` with `N = H * W`. Every
//! gradient-based method reads a [`FeatureCapture`]: the features at one
//! capture point plus the gradient of a (possibly log-transformed) class score
//! with respect to them.
//!
//! Regional localizers are `f^m_n(x)_k = sum_c dP_{k,m}/dZ_{c,n} x_c`, where
//! `P` is the coarse map `P_{k,m} = sum_c dS_k/dZ_{c,m} Z_{c,m}` built from the
//! base score `S` of the chosen [`ScoreTransform`]. Bagging them with a
//! coefficient tensor `L^i_{m,n}` gives
//! `P*_{k,i} = sum_{m,n} L^i_{m,n} f^m_n(Z_i)_k`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Network, Objective};
use crate::tensor::Tensor;

/// Which scalar the class gradient is taken of.
///
/// | transform    | base score `S`      | differentiated      |
/// |--------------|---------------------|---------------------|
/// | `Identity`   | logit `s_k`         | `s_k`               |
/// | `Log`        | logit `s_k` (> 0)   | `ln s_k`            |
/// | `LogSoftmax` | `softmax(s)_k`      | `ln softmax(s)_k`   |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTransform {
    Identity,
    Log,
    LogSoftmax,
}

impl ScoreTransform {
    pub fn is_log(self) -> bool {
        !matches!(self, ScoreTransform::Identity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCapture {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `C x N` features.
    pub z: Vec<f64>,
    /// `C x N` gradient of the transformed class score.
    pub grad: Vec<f64>,
    pub class: usize,
    /// Base score `S` (see [`ScoreTransform`]).
    pub score: f64,
    pub transform: ScoreTransform,
}

impl FeatureCapture {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        z: Vec<f64>,
        grad: Vec<f64>,
        class: usize,
        score: f64,
        transform: ScoreTransform,
    ) -> Result<Self> {
        let n = channels * height * width;
        if n == 0 || z.len() != n || grad.len() != n {
            return Err(Error::Shape(format!(
                "capture {}x{}x{} with {} feature and {} gradient values",
                channels,
                height,
                width,
                z.len(),
                grad.len()
            )));
        }
        Ok(FeatureCapture { channels, height, width, z, grad, class, score, transform })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    MinMax,
    ReluMinMax,
}

/// `rows x (height * width)` scores; one row per class for CAM, a single row
/// for the gradient-based methods.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub rows: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl LocalizationMap {
    pub fn new(rows: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * height * width {
            return Err(Error::Shape(format!("map {}x{}x{} with {} values", rows, height, width, values.len())));
        }
        Ok(LocalizationMap { rows, height, width, values, normalized: false })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let n = self.positions();
        &self.values[k * n..(k + 1) * n]
    }

    /// Keeps only row `k`.
    pub fn select_row(&self, k: usize) -> LocalizationMap {
        LocalizationMap {
            rows: 1,
            height: self.height,
            width: self.width,
            values: self.row(k).to_vec(),
            normalized: self.normalized,
        }
    }
}

/// Coarse localization scores `P_{k,m}` used to seed the regional localizers.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMap {
    pub class: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientScheme {
    /// `L^i = I / N` for every position.
    UniformAverage,
    /// `L^i = diag(alpha)`, alpha from the GradCAM++ rule on the coarse-map gradients.
    SpatialAlpha,
    /// `L^i_{m,n} = [n == i]`.
    Grouping,
    /// Explicit `N x N x N` table indexed `[i][m][n]`.
    Custom(Vec<f64>),
}

impl CoefficientScheme {
    /// Dense `[i][m][n]` table realizing this scheme (`SpatialAlpha` needs the alphas).
    pub fn table(&self, positions: usize, alpha: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = positions;
        let mut t = vec![0.0; n * n * n];
        match self {
            CoefficientScheme::UniformAverage => {
                for i in 0..n {
                    for m in 0..n {
                        t[(i * n + m) * n + m] = 1.0 / n as f64;
                    }
                }
            }
            CoefficientScheme::SpatialAlpha => {
                let alpha = alpha.ok_or_else(|| Error::Shape("spatial alpha table needs alphas".into()))?;
                for i in 0..n {
                    for m in 0..n {
                        t[(i * n + m) * n + m] = alpha[m];
                    }
                }
            }
            CoefficientScheme::Grouping => {
                for i in 0..n {
                    for m in 0..n {
                        t[(i * n + m) * n + i] = 1.0;
                    }
                }
            }
            CoefficientScheme::Custom(table) => {
                if table.len() != n * n * n {
                    return Err(Error::Shape(format!(
                        "custom coefficients need {} values, got {}",
                        n * n * n,
                        table.len()
                    )));
                }
                t.copy_from_slice(table);
            }
        }
        Ok(t)
    }
}

/// Dense set of `N x N` regional localizers, stored `[m][n][k][c]` with
/// entry `dP_{k,m} / dZ_{c,n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalLocalizerSet {
    pub positions: usize,
    pub channels: usize,
    pub classes: Vec<usize>,
    pub data: Vec<f64>,
}

impl RegionalLocalizerSet {
    pub fn entry(&self, m: usize, n: usize, k: usize, c: usize) -> f64 {
        self.data[self.offset(m, n, k) + c]
    }

    fn offset(&self, m: usize, n: usize, k: usize) -> usize {
        ((m * self.positions + n) * self.classes.len() + k) * self.channels
    }

    /// Weights of localizer `f^m_n` for class row `k`.
    pub fn localizer(&self, m: usize, n: usize, k: usize) -> &[f64] {
        let o = self.offset(m, n, k);
        &self.data[o..o + self.channels]
    }

    /// `f^m_n(x)_k = sum_c dP_{k,m}/dZ_{c,n} x_c`.
    pub fn apply(&self, m: usize, n: usize, k: usize, x: &[f64]) -> f64 {
        self.localizer(m, n, k).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Largest magnitude over all `m != n` blocks.
    pub fn max_off_diagonal(&self) -> f64 {
        let mut worst = 0.0f64;
        for m in 0..self.positions {
            for n in 0..self.positions {
                if m != n {
                    for k in 0..self.classes.len() {
                        worst = self.localizer(m, n, k).iter().fold(worst, |a, v| a.max(v.abs()));
                    }
                }
            }
        }
        worst
    }
}

fn column(z: &[f64], channels: usize, positions: usize, i: usize) -> Vec<f64> {
    (0..channels).map(|c| z[c * positions + i]).collect()
}

/// `P_{k,i} = sum_c W_{k,c} Z_{c,i}` for every class.
pub fn cam_project(weights: &Tensor, features: &Tensor) -> Result<LocalizationMap> {
    let (k, cw) = match weights.shape() {
        [k, c] => (*k, *c),
        s => return Err(Error::Shape(format!("head weights must be [K, C], got {:?}", s))),
    };
    let (c, h, w) = match features.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Shape(format!("features must be [C, H, W], got {:?}", s))),
    };
    if c != cw {
        return Err(Error::CamChannels { head: cw, capture: c });
    }
    let n = h * w;
    let z = features.data();
    let mut values = vec![0.0; k * n];
    for row in 0..k {
        let out = &mut values[row * n..(row + 1) * n];
        for ch in 0..c {
            let wv = weights.data()[row * c + ch];
            for (o, zv) in out.iter_mut().zip(&z[ch * n..(ch + 1) * n]) {
                *o += wv * zv;
            }
        }
    }
    LocalizationMap::new(k, h, w, values)
}

fn channel_weighted(cap: &FeatureCapture, weights: &[f64]) -> LocalizationMap {
    let n = cap.positions();
    let mut values = vec![0.0; n];
    for (c, wv) in weights.iter().enumerate() {
        for (o, zv) in values.iter_mut().zip(&cap.z[c * n..(c + 1) * n]) {
            *o += wv * zv;
        }
    }
    LocalizationMap { rows: 1, height: cap.height, width: cap.width, values, normalized: false }
}

/// `P_i = (1/N) sum_{n,c} g_{c,n} Z_{c,i}`.
pub fn gradcam(cap: &FeatureCapture) -> LocalizationMap {
    let n = cap.positions();
    let weights: Vec<f64> =
        (0..cap.channels).map(|c| cap.grad[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64).collect();
    channel_weighted(cap, &weights)
}

/// GradCAM++ spatial weights.
///
/// Per channel, `a_{c,n} = g^2 / (2 g^2 + (sum_m Z_{c,m}) g^3)` with `g = g_{c,n}`
/// (zero where the denominator vanishes); the spatial weight is the channel
/// mean `alpha_n = (1/C) sum_c a_{c,n}`. An all-zero gradient yields `1/N`.
pub fn gradcam_pp_alpha(grad: &[f64], z: &[f64], channels: usize, positions: usize) -> Vec<f64> {
    let n = positions;
    if grad.iter().all(|g| *g == 0.0) {
        return vec![1.0 / n as f64; n];
    }
    let mut alpha = vec![0.0; n];
    for c in 0..channels {
        let zsum: f64 = z[c * n..(c + 1) * n].iter().sum();
        for (i, a) in alpha.iter_mut().enumerate() {
            let g = grad[c * n + i];
            let g2 = g * g;
            let denom = 2.0 * g2 + zsum * g2 * g;
            if denom != 0.0 {
                *a += g2 / denom;
            }
        }
    }
    alpha.iter_mut().for_each(|a| *a /= channels as f64);
    alpha
}

/// `P_i = sum_c max(0, sum_n alpha_n g_{c,n}) Z_{c,i}`.
pub fn gradcam_pp(cap: &FeatureCapture) -> LocalizationMap {
    let n = cap.positions();
    let alpha = gradcam_pp_alpha(&cap.grad, &cap.z, cap.channels, n);
    let weights: Vec<f64> = (0..cap.channels)
        .map(|c| cap.grad[c * n..(c + 1) * n].iter().zip(&alpha).map(|(g, a)| g * a).sum::<f64>().max(0.0))
        .collect();
    channel_weighted(cap, &weights)
}

fn diagonal_products(grad: &[f64], z: &[f64], channels: usize, positions: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions];
    for c in 0..channels {
        let g = &grad[c * positions..(c + 1) * positions];
        let zc = &z[c * positions..(c + 1) * positions];
        for ((o, gv), zv) in out.iter_mut().zip(g).zip(zc) {
            *o += gv * zv;
        }
    }
    out
}

/// `P_i = sum_c g_{c,i} Z_{c,i}`.
pub fn pcs(cap: &FeatureCapture) -> LocalizationMap {
    let values = diagonal_products(&cap.grad, &cap.z, cap.channels, cap.positions());
    LocalizationMap { rows: 1, height: cap.height, width: cap.width, values, normalized: false }
}

/// Coarse map `P_{k,m} = sum_c g_{c,m} Z_{c,m}` (same formula as [`pcs`]).
pub fn coarse_map(cap: &FeatureCapture) -> CoarseMap {
    CoarseMap { class: cap.class, values: diagonal_products(&cap.grad, &cap.z, cap.channels, cap.positions()) }
}

/// Closed-form scalar `lambda_k = S (N C + sum_{m,c} g_{c,m} Z_{c,m})`.
pub fn closed_form_scale(cap: &FeatureCapture) -> f64 {
    let dot: f64 = cap.grad.iter().zip(&cap.z).map(|(g, z)| g * z).sum();
    cap.score * ((cap.positions() * cap.channels) as f64 + dot)
}

/// `P*_i = sum_m sum_{c1} S (1 + g_{c1,m} Z_{c1,m}) * sum_{c2} g_{c2,i} Z_{c2,i}`
/// with `g` the gradient of the log score.
pub fn bagcams_closed(cap: &FeatureCapture) -> Result<LocalizationMap> {
    if !cap.transform.is_log() {
        return Err(Error::Domain("closed-form BagCAMs needs gradients of a log score".into()));
    }
    if cap.score <= 0.0 {
        return Err(Error::Domain(format!("closed-form BagCAMs needs a positive score, got {}", cap.score)));
    }
    let n = cap.positions();
    // the m-sum does not depend on i
    let mut outer = 0.0;
    for m in 0..n {
        for c1 in 0..cap.channels {
            let idx = c1 * n + m;
            outer += cap.score * (1.0 + cap.grad[idx] * cap.z[idx]);
        }
    }
    let inner = diagonal_products(&cap.grad, &cap.z, cap.channels, n);
    let values = inner.into_iter().map(|v| outer * v).collect();
    Ok(LocalizationMap { rows: 1, height: cap.height, width: cap.width, values, normalized: false })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlgOptions {
    /// Central-difference step on individual feature entries.
    pub step: f64,
    /// Skip the `N * C` budget guard.
    pub force: bool,
}

impl Default for RlgOptions {
    fn default() -> Self {
        RlgOptions { step: 1e-5, force: false }
    }
}

pub const RLG_BUDGET: usize = 65_536;

/// Features at `layer` for `image`.
pub fn capture_features(net: &Network, image: &Tensor, layer: &str) -> Result<Tensor> {
    Ok(net.forward_capture(image, layer)?.features().clone())
}

/// Coarse map of the base score evaluated with features `z` at `layer`.
fn coarse_at(
    net: &Network,
    point: &crate::model::CapturePoint,
    z: &Tensor,
    class: usize,
    objective: Objective,
) -> Result<Vec<f64>> {
    let (_, grad) = net.head_objective(point, z, class, objective)?;
    Ok(diagonal_products(grad.data(), z.data(), point.channels, point.positions()))
}

/// Regional localizers for `image` at `layer`, one class.
///
/// Column `(c, n)` of the Jacobian `dP/dZ` is a central difference of the
/// coarse map under a perturbation of `Z_{c,n}`; the score gradient is
/// recomputed at every perturbed point, so second-order terms are included.
pub fn rlg_localizers(
    net: &Network,
    image: &Tensor,
    layer: &str,
    class: usize,
    transform: ScoreTransform,
    opts: RlgOptions,
) -> Result<RegionalLocalizerSet> {
    let z = capture_features(net, image, layer)?;
    rlg_localizers_at(net, layer, &z, class, transform, opts)
}

/// [`rlg_localizers`] with the features at `layer` given directly.
pub fn rlg_localizers_at(
    net: &Network,
    layer: &str,
    z: &Tensor,
    class: usize,
    transform: ScoreTransform,
    opts: RlgOptions,
) -> Result<RegionalLocalizerSet> {
    let point = net.spec().capture(layer)?;
    let (c, n) = (point.channels, point.positions());
    if z.shape() != [c, point.height, point.width] {
        return Err(Error::Shape(format!("features {:?} do not match capture {}", z.shape(), layer)));
    }
    if c * n > RLG_BUDGET && !opts.force {
        return Err(Error::Budget { cost: c * n, limit: RLG_BUDGET });
    }
    if !(opts.step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {}", opts.step)));
    }
    let objective = Objective::base(transform);
    let h = opts.step;
    let columns: Vec<Vec<f64>> = (0..c * n)
        .into_par_iter()
        .map(|j| {
            let mut zp = z.clone();
            let orig = zp.data()[j];
            zp.data_mut()[j] = orig + h;
            let up = coarse_at(net, &point, &zp, class, objective)?;
            zp.data_mut()[j] = orig - h;
            let down = coarse_at(net, &point, &zp, class, objective)?;
            Ok(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect())
        })
        .collect::<Result<_>>()?;
    let mut data = vec![0.0; n * n * c];
    for (j, col) in columns.iter().enumerate() {
        let (ch, pos) = (j / n, j % n);
        for (m, v) in col.iter().enumerate() {
            data[(m * n + pos) * c + ch] = *v;
        }
    }
    Ok(RegionalLocalizerSet { positions: n, channels: c, classes: vec![class], data })
}

/// `P*_{k,i} = sum_m sum_n L^i_{m,n} sum_c F[m][n][k][c] Z_{c,i}`.
pub fn bag_combine(
    localizers: &RegionalLocalizerSet,
    z: &[f64],
    height: usize,
    width: usize,
    scheme: &CoefficientScheme,
) -> Result<LocalizationMap> {
    let (n, c, kk) = (localizers.positions, localizers.channels, localizers.classes.len());
    if height * width != n || z.len() != c * n {
        return Err(Error::Shape(format!(
            "localizers cover {} positions x {} channels, features have {} values on {}x{}",
            n,
            c,
            z.len(),
            height,
            width
        )));
    }
    let mut values = vec![0.0; kk * n];
    for k in 0..kk {
        // Every scheme reduces to a per-position effective localizer
        // w_i = sum_{m,n} L^i_{m,n} F[m][n][k]; the table is only built for Custom.
        let diag_sum = |weights: &[f64]| -> Vec<f64> {
            let mut acc = vec![0.0; c];
            for (m, wm) in weights.iter().enumerate() {
                for (a, f) in acc.iter_mut().zip(localizers.localizer(m, m, k)) {
                    *a += wm * f;
                }
            }
            acc
        };
        match scheme {
            CoefficientScheme::UniformAverage | CoefficientScheme::SpatialAlpha => {
                let weights = if matches!(scheme, CoefficientScheme::UniformAverage) {
                    vec![1.0 / n as f64; n]
                } else {
                    let mut grad = vec![0.0; c * n];
                    for m in 0..n {
                        for (ch, f) in localizers.localizer(m, m, k).iter().enumerate() {
                            grad[ch * n + m] = *f;
                        }
                    }
                    gradcam_pp_alpha(&grad, z, c, n)
                };
                let w = diag_sum(&weights);
                for i in 0..n {
                    values[k * n + i] = (0..c).map(|ch| w[ch] * z[ch * n + i]).sum();
                }
            }
            CoefficientScheme::Grouping => {
                for i in 0..n {
                    let mut acc = 0.0;
                    for m in 0..n {
                        acc += localizers
                            .localizer(m, i, k)
                            .iter()
                            .enumerate()
                            .map(|(ch, f)| f * z[ch * n + i])
                            .sum::<f64>();
                    }
                    values[k * n + i] = acc;
                }
            }
            CoefficientScheme::Custom(_) => {
                let table = scheme.table(n, None)?;
                for i in 0..n {
                    let xi = column(z, c, n, i);
                    let mut acc = 0.0;
                    for m in 0..n {
                        for nn in 0..n {
                            let l = table[(i * n + m) * n + nn];
                            if l != 0.0 {
                                acc += l * localizers.apply(m, nn, k, &xi);
                            }
                        }
                    }
                    values[k * n + i] = acc;
                }
            }
        }
    }
    LocalizationMap::new(kk, height, width, values)
}

/// Exact grouped BagCAMs for one class under `transform`.
///
/// With grouping, `P*_i = sum_c dQ/dZ_{c,i} Z_{c,i}` where `Q = sum_m P_m` is
/// the directional derivative of the base score along `Z`. Its gradient is
/// `grad S + H Z`; the Hessian-vector product is a central difference of
/// `grad S` along `Z` itself (relative step `step`), so only three backward
/// passes through the head are needed whatever the size of the capture.
pub fn bagcams_exact_with(
    net: &Network,
    image: &Tensor,
    layer: &str,
    class: usize,
    transform: ScoreTransform,
    step: f64,
) -> Result<LocalizationMap> {
    let z = capture_features(net, image, layer)?;
    bagcams_exact_at(net, layer, &z, class, transform, step)
}

pub fn bagcams_exact_at(
    net: &Network,
    layer: &str,
    z: &Tensor,
    class: usize,
    transform: ScoreTransform,
    step: f64,
) -> Result<LocalizationMap> {
    let point = net.spec().capture(layer)?;
    if !(step > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {}", step)));
    }
    let objective = Objective::base(transform);
    let (_, grad) = net.head_objective(&point, z, class, objective)?;
    let scaled = |f: f64| {
        let mut t = z.clone();
        t.data_mut().iter_mut().for_each(|v| *v *= f);
        t
    };
    let (_, up) = net.head_objective(&point, &scaled(1.0 + step), class, objective)?;
    let (_, down) = net.head_objective(&point, &scaled(1.0 - step), class, objective)?;
    let effective: Vec<f64> = grad
        .data()
        .iter()
        .zip(up.data().iter().zip(down.data()))
        .map(|(g, (u, d))| g + (u - d) / (2.0 * step))
        .collect();
    let values = diagonal_products(&effective, z.data(), point.channels, point.positions());
    LocalizationMap::new(1, point.height, point.width, values)
}

pub const EXACT_STEP: f64 = 1e-5;

/// Exact BagCAMs (grouping scheme, log-softmax score).
pub fn bagcams_exact(net: &Network, image: &Tensor, layer: &str, class: usize) -> Result<LocalizationMap> {
    bagcams_exact_with(net, image, layer, class, ScoreTransform::LogSoftmax, EXACT_STEP)
}

/// Per-row min-max scaling to `[0, 1]`; a constant row becomes all `0.5`.
pub fn normalize_map(map: &LocalizationMap, mode: NormalizeMode) -> LocalizationMap {
    let n = map.positions();
    let mut values = map.values.clone();
    for row in values.chunks_mut(n.max(1)) {
        if mode == NormalizeMode::ReluMinMax {
            row.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            row.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        } else {
            row.iter_mut().for_each(|v| *v = 0.5);
        }
    }
    LocalizationMap { values, normalized: true, ..map.clone() }
}

/// Bilinear resampling with corner-aligned grids: output pixel `y` samples
/// source row `y * (H_in - 1) / (H_out - 1)` (row 0 when `H_out == 1`), and
/// likewise for columns.
pub fn upsample(map: &LocalizationMap, out_h: usize, out_w: usize) -> Result<LocalizationMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("upsample target must be non-empty".into()));
    }
    if out_h < map.height || out_w < map.width {
        return Err(Error::Shape(format!(
            "upsample target {}x{} smaller than source {}x{}",
            out_h, out_w, map.height, map.width
        )));
    }
    let (h, w) = (map.height, map.width);
    let coord = |o: usize, out: usize, src: usize| -> (usize, usize, f64) {
        if out == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let s = o as f64 * (src - 1) as f64 / (out - 1) as f64;
        let i0 = (s.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut values = Vec::with_capacity(map.rows * out_h * out_w);
    for k in 0..map.rows {
        let src = map.row(k);
        for y in 0..out_h {
            let (y0, y1, fy) = coord(y, out_h, h);
            for x in 0..out_w {
                let (x0, x1, fx) = coord(x, out_w, w);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                values.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(LocalizationMap { rows: map.rows, height: out_h, width: out_w, values, normalized: false })
}
