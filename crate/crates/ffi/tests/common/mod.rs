#![allow(dead_code)]

use std::path::{Path, PathBuf};

use bagcams::model::{InputShape, Layer, Network, NetworkSpec, TrainingMeta};

/// conv+relu, maxpool, conv+relu on a 3x8x8 input with 3 classes.
pub fn net(seed: u64) -> Network {
    let spec = NetworkSpec {
        input: InputShape { channels: 3, height: 8, width: 8 },
        input_offset: 0.5,
        input_scale: 2.0,
        layers: vec![
            Layer::Conv { in_ch: 3, out_ch: 4, kernel: 3, stride: 1, pad: 1 },
            Layer::Relu,
            Layer::MaxPool { size: 2 },
            Layer::Conv { in_ch: 4, out_ch: 5, kernel: 3, stride: 1, pad: 1 },
            Layer::Relu,
        ],
        classes: 3,
    };
    Network::init(spec, seed).unwrap()
}

pub fn save(net: &Network, dir: &Path) -> PathBuf {
    let path = dir.join("model.ckpt");
    net.save_checkpoint(&path, &TrainingMeta { epochs: 1, seed: 0, final_loss: None }).unwrap();
    path
}

/// Deterministic 3x8x8 image in [0, 1].
pub fn image(seed: u64) -> Vec<f64> {
    (0..192u64).map(|i| ((i * 37 + seed * 101) % 97) as f64 / 96.0).collect()
}
