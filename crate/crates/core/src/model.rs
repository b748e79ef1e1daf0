//! The tiny GAP classifier: a stack of conv/relu/maxpool layers (the feature
//! extractor), global average pooling and a linear head.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{FeatureCapture, ScoreTransform};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    /// Images enter the extractor as `(x - input_offset) * input_scale`.
    #[serde(default)]
    pub input_offset: f64,
    #[serde(default = "unit_scale")]
    pub input_scale: f64,
    pub layers: Vec<Layer>,
    pub classes: usize,
}

fn unit_scale() -> f64 {
    1.0
}

/// A named point in the extractor where features can be read out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturePoint {
    pub name: String,
    /// Number of extractor layers applied before the capture.
    pub depth: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl CapturePoint {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

impl NetworkSpec {
    /// conv(3->8, 3x3, pad 1) -> conv(8->16, stride 2) -> conv(16->32, stride 2),
    /// each followed by relu; 64x64 input gives a 32x16x16 final capture.
    pub fn default_for(classes: usize) -> Self {
        let conv = |in_ch, out_ch, stride| Layer::Conv { in_ch, out_ch, kernel: 3, stride, pad: 1 };
        NetworkSpec {
            input: InputShape { channels: 3, height: 64, width: 64 },
            input_offset: 0.5,
            input_scale: 4.0,
            layers: vec![conv(3, 8, 1), Layer::Relu, conv(8, 16, 2), Layer::Relu, conv(16, 32, 2), Layer::Relu],
            classes,
        }
    }

    /// Shape after each layer prefix, `shapes[d]` being the shape after `d` layers.
    fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut cur = [self.input.channels, self.input.height, self.input.width];
        if cur.contains(&0) {
            return Err(Error::InvalidNetwork(format!("empty input shape {:?}", cur)));
        }
        let mut out = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                Layer::Conv { in_ch, out_ch, kernel, stride, pad } => {
                    if in_ch != cur[0] {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {}: conv expects {} input channels, previous layer yields {}",
                            i, in_ch, cur[0]
                        )));
                    }
                    if kernel == 0
                        || stride == 0
                        || out_ch == 0
                        || cur[1] + 2 * pad < kernel
                        || cur[2] + 2 * pad < kernel
                    {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {}: conv geometry does not fit {:?}",
                            i, cur
                        )));
                    }
                    [out_ch, (cur[1] + 2 * pad - kernel) / stride + 1, (cur[2] + 2 * pad - kernel) / stride + 1]
                }
                Layer::Relu => cur,
                Layer::MaxPool { size } => {
                    if size == 0 || cur[1] < size || cur[2] < size {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {}: pool {} does not fit {:?}",
                            i, size, cur
                        )));
                    }
                    [cur[0], cur[1] / size, cur[2] / size]
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Capture points: `input`, one `blockN` per conv block (the conv plus any
    /// relu/maxpool that follow it), and `final` aliasing the extractor output.
    pub fn capture_points(&self) -> Result<Vec<CapturePoint>> {
        if self.classes == 0 {
            return Err(Error::InvalidNetwork("class count must be positive".into()));
        }
        let shapes = self.shapes()?;
        let point = |name: String, depth: usize| {
            let [c, h, w] = shapes[depth];
            CapturePoint { name, depth, channels: c, height: h, width: w }
        };
        let mut points = vec![point("input".into(), 0)];
        let conv_starts: Vec<usize> =
            self.layers.iter().enumerate().filter(|(_, l)| matches!(l, Layer::Conv { .. })).map(|(i, _)| i).collect();
        if self.layers.first().is_some_and(|l| !matches!(l, Layer::Conv { .. })) {
            return Err(Error::InvalidNetwork("the first extractor layer must be a conv".into()));
        }
        for b in 0..conv_starts.len() {
            let end = conv_starts.get(b + 1).copied().unwrap_or(self.layers.len());
            points.push(point(format!("block{}", b + 1), end));
        }
        points.push(point("final".into(), self.layers.len()));
        Ok(points)
    }

    pub fn capture(&self, name: &str) -> Result<CapturePoint> {
        let points = self.capture_points()?;
        let valid: Vec<String> = points.iter().map(|p| p.name.clone()).collect();
        points
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownCapture { name: name.to_string(), valid })
    }

    pub fn feature_channels(&self) -> Result<usize> {
        Ok(self.shapes()?.last().expect("non-empty")[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    convs: Vec<ConvParams>,
    head_weight: Tensor,
    head_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, lr: 0.05, momentum: 0.9, weight_decay: 1e-4, batch_size: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean cross-entropy per epoch.
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Score-side objective evaluated on top of the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Objective {
    Logit,
    Probability,
    LogLogit,
    LogProbability,
}

impl Objective {
    pub(crate) fn transformed(t: ScoreTransform) -> Self {
        match t {
            ScoreTransform::Identity => Objective::Logit,
            ScoreTransform::Log => Objective::LogLogit,
            ScoreTransform::LogSoftmax => Objective::LogProbability,
        }
    }

    /// The positive "score" whose logarithm the transform takes.
    pub(crate) fn base(t: ScoreTransform) -> Self {
        match t {
            ScoreTransform::Identity | ScoreTransform::Log => Objective::Logit,
            ScoreTransform::LogSoftmax => Objective::Probability,
        }
    }
}

struct Recorded {
    graph: Graph,
    features: NodeId,
    scores: NodeId,
    conv_nodes: Vec<(NodeId, NodeId)>,
    head_nodes: (NodeId, NodeId),
}

/// Lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl Network {
    /// Conv kernels uniform in `±sqrt(6 / fan_in)` with zero biases; head
    /// weights and biases uniform in `±sqrt(1 / C)`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.capture_points()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], bound: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape product")
        };
        let mut convs = Vec::new();
        for layer in &spec.layers {
            if let Layer::Conv { in_ch, out_ch, kernel, .. } = *layer {
                let fan_in = in_ch * kernel * kernel;
                convs.push(ConvParams {
                    kernel: uniform(&[out_ch, in_ch, kernel, kernel], (6.0 / fan_in as f64).sqrt()),
                    bias: Tensor::zeros(&[out_ch]),
                });
            }
        }
        let c = spec.feature_channels()?;
        let bound = (1.0 / c as f64).sqrt();
        let head_weight = uniform(&[spec.classes, c], bound);
        let head_bias = uniform(&[spec.classes], bound);
        Ok(Network { spec, convs, head_weight, head_bias })
    }

    /// Builds a network from explicit parameters; shapes are validated.
    pub fn from_parts(
        spec: NetworkSpec,
        convs: Vec<ConvParams>,
        head_weight: Tensor,
        head_bias: Tensor,
    ) -> Result<Self> {
        spec.capture_points()?;
        let conv_layers: Vec<&Layer> = spec.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).collect();
        if conv_layers.len() != convs.len() {
            return Err(Error::InvalidNetwork(format!(
                "{} conv layers but {} parameter sets",
                conv_layers.len(),
                convs.len()
            )));
        }
        for (i, (layer, p)) in conv_layers.iter().zip(&convs).enumerate() {
            if let Layer::Conv { in_ch, out_ch, kernel, .. } = **layer {
                if p.kernel.shape() != [out_ch, in_ch, kernel, kernel] || p.bias.shape() != [out_ch] {
                    return Err(Error::InvalidNetwork(format!(
                        "conv {}: kernel {:?} / bias {:?} do not match layer",
                        i,
                        p.kernel.shape(),
                        p.bias.shape()
                    )));
                }
            }
        }
        let c = spec.feature_channels()?;
        if head_weight.shape() != [spec.classes, c] || head_bias.shape() != [spec.classes] {
            return Err(Error::InvalidNetwork(format!(
                "head weight {:?} / bias {:?}, expected [{}, {}]",
                head_weight.shape(),
                head_bias.shape(),
                spec.classes,
                c
            )));
        }
        Ok(Network { spec, convs, head_weight, head_bias })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn convs(&self) -> &[ConvParams] {
        &self.convs
    }

    /// Head weights `W`, shape `[K, C]`.
    pub fn head_weight(&self) -> &Tensor {
        &self.head_weight
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.head_bias
    }

    /// Scales the head weights in place (bias untouched).
    pub fn scale_head(&mut self, factor: f64) {
        self.head_weight.data_mut().iter_mut().for_each(|w| *w *= factor);
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let i = self.spec.input;
        if image.shape() != [i.channels, i.height, i.width] {
            return Err(Error::InputShape { expected: [i.channels, i.height, i.width], got: image.shape().to_vec() });
        }
        Ok(())
    }

    /// Runs extractor layers `from..to` on `x` inside `graph`.
    fn run_layers(
        &self,
        graph: &mut Graph,
        mut x: NodeId,
        from: usize,
        to: usize,
        conv_nodes: &mut Vec<(NodeId, NodeId)>,
    ) -> Result<NodeId> {
        let mut conv_idx = self.spec.layers[..from].iter().filter(|l| matches!(l, Layer::Conv { .. })).count();
        for layer in &self.spec.layers[from..to] {
            x = match *layer {
                Layer::Conv { stride, pad, .. } => {
                    let p = &self.convs[conv_idx];
                    conv_idx += 1;
                    let k = graph.leaf(p.kernel.clone());
                    let b = graph.leaf(p.bias.clone());
                    conv_nodes.push((k, b));
                    graph.conv2d(x, k, b, stride, pad)?
                }
                Layer::Relu => graph.relu(x)?,
                Layer::MaxPool { size } => graph.max_pool2d(x, size)?,
            };
        }
        Ok(x)
    }

    fn record(&self, image: &Tensor, depth: usize) -> Result<Recorded> {
        let mut graph = Graph::new();
        let (offset, scale) = (self.spec.input_offset, self.spec.input_scale);
        let mut input = image.clone();
        input.data_mut().iter_mut().for_each(|v| *v = (*v - offset) * scale);
        let x = graph.leaf(input);
        let mut conv_nodes = Vec::new();
        let features = self.run_layers(&mut graph, x, 0, depth, &mut conv_nodes)?;
        let tail = self.run_layers(&mut graph, features, depth, self.spec.layers.len(), &mut conv_nodes)?;
        let pooled = graph.global_avg_pool(tail)?;
        let w = graph.leaf(self.head_weight.clone());
        let b = graph.leaf(self.head_bias.clone());
        let scores = graph.linear(pooled, w, b)?;
        Ok(Recorded { graph, features, scores, conv_nodes, head_nodes: (w, b) })
    }

    /// Classification logits `s = W GAP(e(X)) + b`.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let rec = self.record(image, 0)?;
        Ok(rec.graph.value(rec.scores).data().to_vec())
    }

    /// Forward pass keeping the record alive for gradient extraction at `layer`.
    pub fn forward_capture(&self, image: &Tensor, layer: &str) -> Result<ForwardPass> {
        self.check_input(image)?;
        let point = self.spec.capture(layer)?;
        let rec = self.record(image, point.depth)?;
        Ok(ForwardPass { graph: rec.graph, features: rec.features, scores: rec.scores, point })
    }

    /// Runs the network from a capture point onward with `z` as the features
    /// there, returning the logits together with the value and gradient
    /// (w.r.t. `z`) of `objective` for class `class`.
    pub(crate) fn head_objective(
        &self,
        point: &CapturePoint,
        z: &Tensor,
        class: usize,
        objective: Objective,
    ) -> Result<(f64, Tensor)> {
        let mut graph = Graph::new();
        let zn = graph.leaf(z.clone());
        let mut convs = Vec::new();
        let tail = self.run_layers(&mut graph, zn, point.depth, self.spec.layers.len(), &mut convs)?;
        let pooled = graph.global_avg_pool(tail)?;
        let w = graph.leaf(self.head_weight.clone());
        let b = graph.leaf(self.head_bias.clone());
        let scores = graph.linear(pooled, w, b)?;
        let target = objective_node(&mut graph, scores, class, objective)?;
        let value = graph.value(target).data()[0];
        let grads = graph.backward(target)?;
        Ok((value, grads.get_or_zeros(zn, z.shape())))
    }

    /// Logits with the features at capture `layer` replaced by `z`.
    pub fn scores_from_features(&self, layer: &str, z: &Tensor) -> Result<Vec<f64>> {
        let point = self.spec.capture(layer)?;
        if z.shape() != [point.channels, point.height, point.width] {
            return Err(Error::Shape(format!("features {:?} do not match capture {}", z.shape(), layer)));
        }
        let mut graph = Graph::new();
        let zn = graph.leaf(z.clone());
        let mut convs = Vec::new();
        let tail = self.run_layers(&mut graph, zn, point.depth, self.spec.layers.len(), &mut convs)?;
        let pooled = graph.global_avg_pool(tail)?;
        let w = graph.leaf(self.head_weight.clone());
        let b = graph.leaf(self.head_bias.clone());
        let scores = graph.linear(pooled, w, b)?;
        Ok(graph.value(scores).data().to_vec())
    }

    fn sample_gradients(&self, image: &Tensor, label: usize) -> Result<(f64, Vec<Tensor>, usize)> {
        let mut rec = self.record(image, 0)?;
        let predicted = argmax(rec.graph.value(rec.scores).data());
        let loss = rec.graph.cross_entropy(rec.scores, label)?;
        let loss_value = rec.graph.value(loss).data()[0];
        let mut grads = rec.graph.backward(loss)?;
        let mut out = Vec::with_capacity(2 * rec.conv_nodes.len() + 2);
        for (i, (k, b)) in rec.conv_nodes.iter().enumerate() {
            out.push(grads.take(*k).unwrap_or_else(|| Tensor::zeros(self.convs[i].kernel.shape())));
            out.push(grads.take(*b).unwrap_or_else(|| Tensor::zeros(self.convs[i].bias.shape())));
        }
        out.push(grads.take(rec.head_nodes.0).unwrap_or_else(|| Tensor::zeros(self.head_weight.shape())));
        out.push(grads.take(rec.head_nodes.1).unwrap_or_else(|| Tensor::zeros(self.head_bias.shape())));
        Ok((loss_value, out, predicted))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for p in self.convs.iter_mut() {
            out.push(&mut p.kernel);
            out.push(&mut p.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Mini-batch SGD with momentum and weight decay on the cross-entropy loss.
    /// Sample order is shuffled per epoch from `config.seed`.
    pub fn train(&mut self, data: &[(Tensor, usize)], config: &TrainConfig) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::InvalidData("empty training set".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::InvalidData("batch size must be positive".into()));
        }
        for (i, (img, label)) in data.iter().enumerate() {
            if *label >= self.spec.classes {
                return Err(Error::InvalidData(format!(
                    "sample {}: label {} not in [0, {})",
                    i, label, self.spec.classes
                )));
            }
            self.check_input(img)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut velocity: Vec<Vec<f64>> = self.params_mut().iter().map(|p| vec![0.0; p.len()]).collect();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::with_capacity(config.epochs);
        let mut correct = 0;

        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            correct = 0;
            for batch in order.chunks(config.batch_size) {
                let mut acc: Option<Vec<Tensor>> = None;
                for &i in batch {
                    let (loss, grads, predicted) = self.sample_gradients(&data[i].0, data[i].1)?;
                    if !loss.is_finite() {
                        return Err(Error::Diverged { epoch, loss });
                    }
                    epoch_loss += loss;
                    correct += usize::from(predicted == data[i].1);
                    match &mut acc {
                        None => acc = Some(grads),
                        Some(sum) => {
                            for (s, g) in sum.iter_mut().zip(&grads) {
                                s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                let grads = acc.expect("non-empty batch");
                for ((param, grad), vel) in self.params_mut().into_iter().zip(&grads).zip(&mut velocity) {
                    for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
                        let step = g * scale + config.weight_decay * *p;
                        *v = config.momentum * *v + step;
                        *p -= config.lr * *v;
                    }
                }
            }
            let mean = epoch_loss / data.len() as f64;
            if !mean.is_finite() || self.params_mut().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch, loss: mean });
            }
            losses.push(mean);
        }
        let train_accuracy = if config.epochs == 0 { 0.0 } else { correct as f64 / data.len() as f64 };
        Ok(TrainReport { losses, train_accuracy })
    }

    pub fn accuracy(&self, data: &[(Tensor, usize)]) -> Result<f64> {
        let mut correct = 0;
        for (img, label) in data {
            correct += usize::from(argmax(&self.forward(img)?) == *label);
        }
        Ok(correct as f64 / data.len().max(1) as f64)
    }
}

fn objective_node(graph: &mut Graph, scores: NodeId, class: usize, objective: Objective) -> Result<NodeId> {
    let k = graph.value(scores).len();
    if class >= k {
        return Err(Error::Shape(format!("class {} out of range for {} classes", class, k)));
    }
    Ok(match objective {
        Objective::Logit => graph.pick(scores, class)?,
        Objective::LogLogit => {
            let s = graph.pick(scores, class)?;
            let v = graph.value(s).data()[0];
            if v <= 0.0 {
                return Err(Error::Domain(format!("log transform needs a positive score, class {} has {}", class, v)));
            }
            graph.log(s)?
        }
        Objective::Probability => {
            let p = graph.softmax(scores)?;
            graph.pick(p, class)?
        }
        Objective::LogProbability => {
            let p = graph.log_softmax(scores)?;
            graph.pick(p, class)?
        }
    })
}

/// A recorded forward pass with features held at a capture point.
#[derive(Debug)]
pub struct ForwardPass {
    graph: Graph,
    features: NodeId,
    scores: NodeId,
    point: CapturePoint,
}

impl ForwardPass {
    pub fn scores(&self) -> &[f64] {
        self.graph.value(self.scores).data()
    }

    pub fn features(&self) -> &Tensor {
        self.graph.value(self.features)
    }

    pub fn point(&self) -> &CapturePoint {
        &self.point
    }

    pub fn predicted(&self) -> usize {
        argmax(self.scores())
    }

    /// Backward from the transformed class score to the captured features.
    pub fn capture(&mut self, class: usize, transform: ScoreTransform) -> Result<FeatureCapture> {
        let target = objective_node(&mut self.graph, self.scores, class, Objective::transformed(transform))?;
        let transformed = self.graph.value(target).data()[0];
        let grads = self.graph.backward(target)?;
        let z = self.features().clone();
        let grad = grads.get_or_zeros(self.features, z.shape());
        let score = match transform {
            ScoreTransform::Identity => transformed,
            ScoreTransform::Log | ScoreTransform::LogSoftmax => transformed.exp(),
        };
        FeatureCapture::new(
            self.point.channels,
            self.point.height,
            self.point.width,
            z.into_data(),
            grad.into_data(),
            class,
            score,
            transform,
        )
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: 8-byte magic `BAGCKPT\0`, u64 LE header length, UTF-8 JSON header,
// then every parameter block as consecutive f64 LE values in header order.

const MAGIC: &[u8; 8] = b"BAGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    spec: NetworkSpec,
    blocks: Vec<BlockInfo>,
    training: TrainingMeta,
}

impl Network {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.convs.iter().enumerate() {
            out.push((format!("conv{}.kernel", i + 1), &p.kernel));
            out.push((format!("conv{}.bias", i + 1), &p.bias));
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn to_checkpoint_bytes(&self, meta: &TrainingMeta) -> Vec<u8> {
        let params = self.named_params();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            blocks: params.iter().map(|(n, t)| BlockInfo { name: n.clone(), shape: t.shape().to_vec() }).collect(),
            training: meta.clone(),
        };
        let json = serde_json::to_vec_pretty(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + params.iter().map(|(_, t)| t.len() * 8).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<(Self, TrainingMeta)> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::corrupt(path, "missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body =
            bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| Error::corrupt(path, "truncated header"))?;
        let raw: serde_json::Value =
            serde_json::from_slice(body).map_err(|e| Error::corrupt(path, format!("header: {}", e)))?;
        let version =
            raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| Error::corrupt(path, "header lacks version"))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::Version { path: path.into(), found: version as u32, supported: CHECKPOINT_VERSION });
        }
        let header: CheckpointHeader =
            serde_json::from_value(raw).map_err(|e| Error::corrupt(path, format!("header: {}", e)))?;
        let mut offset = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.blocks.len());
        for block in &header.blocks {
            let n: usize = block.shape.iter().product();
            let end = offset + n * 8;
            let chunk = bytes
                .get(offset..end)
                .ok_or_else(|| Error::corrupt(path, format!("truncated block {}", block.name)))?;
            let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(Tensor::new(block.shape.clone(), data)?);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::corrupt(path, format!("{} trailing bytes", bytes.len() - offset)));
        }
        if tensors.len() < 2 || tensors.len() % 2 != 0 {
            return Err(Error::corrupt(path, "unexpected parameter block count"));
        }
        let head_bias = tensors.pop().expect("len >= 2");
        let head_weight = tensors.pop().expect("len >= 2");
        let mut convs = Vec::new();
        let mut it = tensors.into_iter();
        while let (Some(kernel), Some(bias)) = (it.next(), it.next()) {
            convs.push(ConvParams { kernel, bias });
        }
        let net = Network::from_parts(header.spec, convs, head_weight, head_bias)
            .map_err(|e| Error::corrupt(path, e.to_string()))?;
        Ok((net, header.training))
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &TrainingMeta) -> Result<()> {
        let bytes = self.to_checkpoint_bytes(meta);
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, TrainingMeta)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}
