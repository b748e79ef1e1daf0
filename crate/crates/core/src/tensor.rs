//! Dense 64-bit tensors and a recorded computation graph with reverse-mode
//! differentiation.
//!
//! Layout conventions (row-major throughout):
//!
//! * feature maps are `[C, H, W]`;
//! * convolution kernels are `[O, C, k, k]` with bias `[O]`;
//! * linear layers take `z: [C]`, `W: [K, C]`, `b: [K]` and produce `W z + b`.
//!
//! `conv2d` uses zero padding of `pad` pixels on every border and an explicit
//! stride. Output extent is `(H + 2 pad - k) / stride + 1` (floor division).
//! Output pixel `(y, x)` reads input rows `y * stride + ky - pad` and columns
//! `x * stride + kx - pad` for `ky, kx in 0..k`; taps falling outside the input
//! contribute zero.
//!
//! `max_pool2d(size)` uses non-overlapping `size x size` windows starting at
//! the origin. Output extent is `H / size` (floor); trailing rows/columns that
//! do not fill a window are dropped. Within a window the first maximum in
//! raster order wins and receives the whole gradient.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward source must hold a single value, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("node {0} does not belong to this computation record")]
    Detached(usize),
    #[error("finite difference: {0}")]
    FiniteDifference(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Handle into a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    /// inputs: x `[C,H,W]`, kernel `[O,C,k,k]`, bias `[O]`
    Conv2d {
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2d {
        size: usize,
    },
    /// `[C,H,W]` -> `[C]`
    GlobalAvgPool,
    /// inputs: z `[C]`, W `[K,C]`, b `[K]`
    Linear,
    Add,
    Mul,
    /// `[M,K] x [K,N]`
    MatMul,
    Log,
    /// over a 1-D tensor
    Softmax,
    LogSoftmax,
    /// input: logits `[K]`; output `[1]`
    CrossEntropy {
        label: usize,
    },
    Sum,
    Pick {
        index: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d { .. } => "max_pool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Log => "log",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::CrossEntropy { .. } => "cross_entropy",
            OpKind::Sum => "sum",
            OpKind::Pick { .. } => "pick",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Conv2d { .. } | OpKind::Linear => 3,
            OpKind::Add | OpKind::Mul | OpKind::MatMul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum Recorded {
    Leaf,
    Op(OpKind),
}

#[derive(Debug)]
struct Node {
    kind: Recorded,
    inputs: Vec<NodeId>,
    value: Tensor,
    // max_pool2d argmax positions, one per output element
    saved: Vec<usize>,
}

/// Append-only computation record. Inputs of every node precede it, so a
/// reverse sweep over the node list is a valid topological order.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient table produced by [`Graph::backward`], keyed by node.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `id`, or zeros of `shape` if `id` does not
    /// influence the source.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Range of output columns `x` whose input column `x*stride + kx - pad` lies in `0..extent`.
fn valid_range(out: usize, extent: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    // need x*stride + kx >= pad  and  x*stride + kx - pad < extent
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let limit = extent + pad; // x*stride + kx < limit
    let hi = if limit > kx { ((limit - kx - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

impl Graph {
    /// The finite-value sweep after every op is on in debug builds.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    pub fn with_finite_check(check: bool) -> Self {
        Graph { nodes: Vec::new(), check_finite: check }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { kind: Recorded::Leaf, inputs: Vec::new(), value, saved: Vec::new() });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes.get(id.0).map(|n| &n.value).ok_or(TensorError::Detached(id.0))
    }

    /// Evaluates `op` on recorded inputs and appends the result.
    pub fn record(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let name = op.name();
        if inputs.len() != op.arity() {
            return Err(mismatch(name, format!("expected {} inputs, got {}", op.arity(), inputs.len())));
        }
        for &id in inputs {
            self.check(id)?;
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|&id| &self.nodes[id.0].value).collect();
        let (value, saved) = forward(op, &vals)?;
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { kind: Recorded::Op(op), inputs: inputs.to_vec(), value, saved });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.record(OpKind::Conv2d { stride, pad }, &[x, kernel, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Relu, &[x])
    }

    pub fn max_pool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        self.record(OpKind::MaxPool2d { size }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::GlobalAvgPool, &[x])
    }

    pub fn linear(&mut self, z: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(OpKind::Linear, &[z, weight, bias])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Log, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::LogSoftmax, &[x])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.record(OpKind::CrossEntropy { label }, &[logits])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sum, &[x])
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.record(OpKind::Pick { index }, &[x])
    }

    /// Reverse sweep from a single-valued node. Every node that `source`
    /// depends on receives a gradient slot; others stay empty.
    pub fn backward(&self, source: NodeId) -> Result<Gradients> {
        let src = self.check(source)?;
        if src.len() != 1 {
            return Err(TensorError::NonScalar(src.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; source.0 + 1];
        grads[source.0] = Some(Tensor::new(src.shape().to_vec(), vec![1.0])?);

        for idx in (0..=source.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Recorded::Op(op) = node.kind {
                let vals: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let input_grads = backward_op(op, &vals, &node.value, &node.saved, &gout);
                for (input, g) in node.inputs.iter().zip(input_grads) {
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(mismatch(op, format!("expected rank {} input, got shape {:?}", rank, t.shape())));
    }
    Ok(())
}

fn forward(op: OpKind, x: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let name = op.name();
    let out = match op {
        OpKind::Conv2d { stride, pad } => {
            let (inp, ker, bias) = (x[0], x[1], x[2]);
            expect_rank(name, inp, 3)?;
            expect_rank(name, ker, 4)?;
            let (c, h, w) = (inp.shape[0], inp.shape[1], inp.shape[2]);
            let (o, kc, k, k2) = (ker.shape[0], ker.shape[1], ker.shape[2], ker.shape[3]);
            if kc != c || k != k2 || bias.shape() != [o] {
                return Err(mismatch(
                    name,
                    format!("input {:?}, kernel {:?}, bias {:?}", inp.shape, ker.shape, bias.shape),
                ));
            }
            let (Some(ho), Some(wo)) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)) else {
                return Err(mismatch(
                    name,
                    format!("kernel {} stride {} pad {} does not fit input {:?}", k, stride, pad, inp.shape),
                ));
            };
            let mut out = vec![0.0; o * ho * wo];
            for oc in 0..o {
                let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
                plane.iter_mut().for_each(|v| *v = bias.data[oc]);
                for ic in 0..c {
                    let src = &inp.data[ic * h * w..(ic + 1) * h * w];
                    for ky in 0..k {
                        let (y_lo, y_hi) = valid_range(ho, h, stride, ky, pad);
                        for kx in 0..k {
                            let wv = ker.data[((oc * c + ic) * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (x_lo, x_hi) = valid_range(wo, w, stride, kx, pad);
                            for oy in y_lo..y_hi {
                                let iy = oy * stride + ky - pad;
                                let row = &src[iy * w..(iy + 1) * w];
                                let orow = &mut plane[oy * wo..(oy + 1) * wo];
                                if stride == 1 {
                                    let off = x_lo + kx - pad;
                                    for (ov, iv) in orow[x_lo..x_hi].iter_mut().zip(&row[off..off + (x_hi - x_lo)]) {
                                        *ov += wv * iv;
                                    }
                                } else {
                                    for ox in x_lo..x_hi {
                                        orow[ox] += wv * row[ox * stride + kx - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor { shape: vec![o, ho, wo], data: out }
        }
        OpKind::Relu => Tensor { shape: x[0].shape.clone(), data: x[0].data.iter().map(|v| v.max(0.0)).collect() },
        OpKind::MaxPool2d { size } => {
            let inp = x[0];
            expect_rank(name, inp, 3)?;
            let (c, h, w) = (inp.shape[0], inp.shape[1], inp.shape[2]);
            if size == 0 || h < size || w < size {
                return Err(mismatch(name, format!("window {} does not fit input {:?}", size, inp.shape)));
            }
            let (ho, wo) = (h / size, w / size);
            let mut out = Vec::with_capacity(c * ho * wo);
            let mut arg = Vec::with_capacity(c * ho * wo);
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for dy in 0..size {
                            for dx in 0..size {
                                let idx = (ch * h + oy * size + dy) * w + ox * size + dx;
                                if best == usize::MAX || inp.data[idx] > best_v {
                                    best = idx;
                                    best_v = inp.data[idx];
                                }
                            }
                        }
                        out.push(best_v);
                        arg.push(best);
                    }
                }
            }
            return Ok((Tensor { shape: vec![c, ho, wo], data: out }, arg));
        }
        OpKind::GlobalAvgPool => {
            let inp = x[0];
            expect_rank(name, inp, 3)?;
            let c = inp.shape[0];
            let n = inp.shape[1] * inp.shape[2];
            if n == 0 {
                return Err(mismatch(name, format!("empty spatial extent {:?}", inp.shape)));
            }
            let data = (0..c).map(|ch| inp.data[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect();
            Tensor { shape: vec![c], data }
        }
        OpKind::Linear => {
            let (z, wt, b) = (x[0], x[1], x[2]);
            expect_rank(name, z, 1)?;
            expect_rank(name, wt, 2)?;
            let (k, c) = (wt.shape[0], wt.shape[1]);
            if z.shape[0] != c || b.shape() != [k] {
                return Err(mismatch(name, format!("z {:?}, W {:?}, b {:?}", z.shape, wt.shape, b.shape)));
            }
            let data = (0..k)
                .map(|r| b.data[r] + wt.data[r * c..(r + 1) * c].iter().zip(&z.data).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            Tensor { shape: vec![k], data }
        }
        OpKind::Add | OpKind::Mul => {
            if x[0].shape != x[1].shape {
                return Err(mismatch(name, format!("{:?} vs {:?}", x[0].shape, x[1].shape)));
            }
            let data = x[0]
                .data
                .iter()
                .zip(&x[1].data)
                .map(|(a, b)| if matches!(op, OpKind::Add) { a + b } else { a * b })
                .collect();
            Tensor { shape: x[0].shape.clone(), data }
        }
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            expect_rank(name, a, 2)?;
            expect_rank(name, b, 2)?;
            let (m, kk, n) = (a.shape[0], a.shape[1], b.shape[1]);
            if b.shape[0] != kk {
                return Err(mismatch(name, format!("{:?} x {:?}", a.shape, b.shape)));
            }
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..kk {
                    let av = a.data[i * kk + p];
                    for j in 0..n {
                        out[i * n + j] += av * b.data[p * n + j];
                    }
                }
            }
            Tensor { shape: vec![m, n], data: out }
        }
        OpKind::Log => {
            if let Some(v) = x[0].data.iter().find(|v| **v <= 0.0) {
                return Err(TensorError::Domain { op: name, detail: format!("non-positive input {}", v) });
            }
            Tensor { shape: x[0].shape.clone(), data: x[0].data.iter().map(|v| v.ln()).collect() }
        }
        OpKind::Softmax | OpKind::LogSoftmax => {
            expect_rank(name, x[0], 1)?;
            if x[0].is_empty() {
                return Err(mismatch(name, "empty input".into()));
            }
            let data =
                if matches!(op, OpKind::Softmax) { softmax_slice(&x[0].data) } else { log_softmax_slice(&x[0].data) };
            Tensor { shape: x[0].shape.clone(), data }
        }
        OpKind::CrossEntropy { label } => {
            expect_rank(name, x[0], 1)?;
            if label >= x[0].len() {
                return Err(mismatch(name, format!("label {} out of range for {} logits", label, x[0].len())));
            }
            Tensor::scalar(-log_softmax_slice(&x[0].data)[label])
        }
        OpKind::Sum => Tensor::scalar(x[0].data.iter().sum()),
        OpKind::Pick { index } => {
            if index >= x[0].len() {
                return Err(mismatch(name, format!("index {} out of range for {:?}", index, x[0].shape)));
            }
            Tensor::scalar(x[0].data[index])
        }
    };
    Ok((out, Vec::new()))
}

fn backward_op(op: OpKind, x: &[&Tensor], out: &Tensor, saved: &[usize], g: &Tensor) -> Vec<Tensor> {
    match op {
        OpKind::Conv2d { stride, pad } => {
            let (inp, ker) = (x[0], x[1]);
            let (c, h, w) = (inp.shape[0], inp.shape[1], inp.shape[2]);
            let (o, k) = (ker.shape[0], ker.shape[2]);
            let (ho, wo) = (out.shape[1], out.shape[2]);
            let mut gx = vec![0.0; inp.len()];
            let mut gk = vec![0.0; ker.len()];
            let mut gb = vec![0.0; o];
            for oc in 0..o {
                let gplane = &g.data[oc * ho * wo..(oc + 1) * ho * wo];
                gb[oc] = gplane.iter().sum();
                for ic in 0..c {
                    let src = &inp.data[ic * h * w..(ic + 1) * h * w];
                    let dst = &mut gx[ic * h * w..(ic + 1) * h * w];
                    for ky in 0..k {
                        let (y_lo, y_hi) = valid_range(ho, h, stride, ky, pad);
                        for kx in 0..k {
                            let widx = ((oc * c + ic) * k + ky) * k + kx;
                            let wv = ker.data[widx];
                            let (x_lo, x_hi) = valid_range(wo, w, stride, kx, pad);
                            let mut acc = 0.0;
                            for oy in y_lo..y_hi {
                                let iy = oy * stride + ky - pad;
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                if stride == 1 {
                                    let off = iy * w + x_lo + kx - pad;
                                    let len = x_hi - x_lo;
                                    for ((gv, sv), dv) in grow[x_lo..x_hi]
                                        .iter()
                                        .zip(&src[off..off + len])
                                        .zip(dst[off..off + len].iter_mut())
                                    {
                                        acc += gv * sv;
                                        *dv += wv * gv;
                                    }
                                } else {
                                    for ox in x_lo..x_hi {
                                        let ii = iy * w + ox * stride + kx - pad;
                                        acc += grow[ox] * src[ii];
                                        dst[ii] += wv * grow[ox];
                                    }
                                }
                            }
                            gk[widx] += acc;
                        }
                    }
                }
            }
            vec![
                Tensor { shape: inp.shape.clone(), data: gx },
                Tensor { shape: ker.shape.clone(), data: gk },
                Tensor { shape: vec![o], data: gb },
            ]
        }
        OpKind::Relu => vec![Tensor {
            shape: x[0].shape.clone(),
            data: x[0].data.iter().zip(&g.data).map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 }).collect(),
        }],
        OpKind::MaxPool2d { .. } => {
            let mut gx = vec![0.0; x[0].len()];
            for (&idx, gv) in saved.iter().zip(&g.data) {
                gx[idx] += gv;
            }
            vec![Tensor { shape: x[0].shape.clone(), data: gx }]
        }
        OpKind::GlobalAvgPool => {
            let inp = x[0];
            let n = inp.shape[1] * inp.shape[2];
            let mut gx = Vec::with_capacity(inp.len());
            for gv in &g.data {
                gx.extend(std::iter::repeat_n(gv / n as f64, n));
            }
            vec![Tensor { shape: inp.shape.clone(), data: gx }]
        }
        OpKind::Linear => {
            let (z, wt) = (x[0], x[1]);
            let (k, c) = (wt.shape[0], wt.shape[1]);
            let mut gz = vec![0.0; c];
            let mut gw = vec![0.0; k * c];
            for r in 0..k {
                let gr = g.data[r];
                for j in 0..c {
                    gz[j] += wt.data[r * c + j] * gr;
                    gw[r * c + j] = gr * z.data[j];
                }
            }
            vec![
                Tensor { shape: vec![c], data: gz },
                Tensor { shape: vec![k, c], data: gw },
                Tensor { shape: vec![k], data: g.data.clone() },
            ]
        }
        OpKind::Add => vec![g.clone(), g.clone()],
        OpKind::Mul => vec![
            Tensor { shape: g.shape.clone(), data: g.data.iter().zip(&x[1].data).map(|(a, b)| a * b).collect() },
            Tensor { shape: g.shape.clone(), data: g.data.iter().zip(&x[0].data).map(|(a, b)| a * b).collect() },
        ],
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, kk, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut ga = vec![0.0; m * kk];
            let mut gb = vec![0.0; kk * n];
            for i in 0..m {
                for p in 0..kk {
                    let mut acc = 0.0;
                    let av = a.data[i * kk + p];
                    for j in 0..n {
                        let gv = g.data[i * n + j];
                        acc += gv * b.data[p * n + j];
                        gb[p * n + j] += av * gv;
                    }
                    ga[i * kk + p] = acc;
                }
            }
            vec![Tensor { shape: a.shape.clone(), data: ga }, Tensor { shape: b.shape.clone(), data: gb }]
        }
        OpKind::Log => vec![Tensor {
            shape: x[0].shape.clone(),
            data: g.data.iter().zip(&x[0].data).map(|(gv, v)| gv / v).collect(),
        }],
        OpKind::Softmax => {
            let dot: f64 = g.data.iter().zip(&out.data).map(|(a, b)| a * b).sum();
            vec![Tensor {
                shape: out.shape.clone(),
                data: out.data.iter().zip(&g.data).map(|(y, gv)| y * (gv - dot)).collect(),
            }]
        }
        OpKind::LogSoftmax => {
            let total: f64 = g.data.iter().sum();
            vec![Tensor {
                shape: out.shape.clone(),
                data: out.data.iter().zip(&g.data).map(|(ly, gv)| gv - ly.exp() * total).collect(),
            }]
        }
        OpKind::CrossEntropy { label } => {
            let mut p = softmax_slice(&x[0].data);
            p[label] -= 1.0;
            let gs = g.data[0];
            vec![Tensor { shape: x[0].shape.clone(), data: p.into_iter().map(|v| v * gs).collect() }]
        }
        OpKind::Sum => vec![Tensor { shape: x[0].shape.clone(), data: vec![g.data[0]; x[0].len()] }],
        OpKind::Pick { index } => {
            let mut gx = vec![0.0; x[0].len()];
            gx[index] = g.data[0];
            vec![Tensor { shape: x[0].shape.clone(), data: gx }]
        }
    }
}

/// Central-difference estimate `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
pub fn finite_difference_gradient<F>(f: F, at: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(TensorError::FiniteDifference(format!("step must be positive, got {}", step)));
    }
    let mut probe = at.clone();
    let mut grad = vec![0.0; at.len()];
    for i in 0..at.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let up = f(&probe)?;
        probe.data[i] = orig - step;
        let down = f(&probe)?;
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::FiniteDifference(format!("non-finite evaluation at element {}", i)));
        }
        grad[i] = (up - down) / (2.0 * step);
    }
    Tensor::new(at.shape.clone(), grad)
}
