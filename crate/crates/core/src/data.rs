//! Synthetic marker dataset.
//!
//! Every object is a textured body (ellipse, rectangle, triangle or cross,
//! chosen independently of the class) drawn with one shared texture. The
//! class is carried only by a small solid-colour marker placed inside the
//! body, away from its centre.
//!
//! On disk: `manifest.json`, `images/<id>.ppm` (P6) and `masks/<id>.pgm`
//! (P5, 255 = object).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{BBox, GroundTruth};
use crate::pnm::{self, Pnm};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;
pub const IMAGE_SIZE: usize = 64;
pub const MARKER_SIZE: usize = 5;
pub const MAX_CLASSES: usize = 8;
const MAX_ATTEMPTS: usize = 200;

const MARKER_COLORS: [[f64; 3]; MAX_CLASSES] = [
    [0.95, 0.10, 0.10],
    [0.10, 0.85, 0.15],
    [0.10, 0.20, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.10, 0.90],
    [0.10, 0.90, 0.90],
    [1.00, 1.00, 1.00],
    [0.00, 0.00, 0.00],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { classes: 4, n_train: 400, n_test: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Body {
    Ellipse,
    Rectangle,
    Triangle,
    Cross,
}

const BODIES: [Body; 4] = [Body::Ellipse, Body::Rectangle, Body::Triangle, Body::Cross];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    /// `[3, 64, 64]`, values are multiples of 1/255.
    pub image: Tensor,
    pub mask: Vec<bool>,
    pub bbox: BBox,
    pub marker: BBox,
    pub body: Body,
}

impl Sample {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
            mask: Some(self.mask.clone()),
            boxes: vec![self.bbox],
            class: self.label,
        }
    }

    /// Checks the geometric contract every generated sample satisfies.
    pub fn check(&self) -> Result<()> {
        let fail = |why: String| Err(Error::Generation(format!("{}: {}", self.id, why)));
        let area = self.mask.iter().filter(|&&m| m).count();
        let total = IMAGE_SIZE * IMAGE_SIZE;
        if area * 100 < total * 8 || area * 100 > total * 40 {
            return fail(format!("mask area {} outside 8%..40%", area));
        }
        if BBox::of_mask(&self.mask, IMAGE_SIZE) != Some(self.bbox) {
            return fail("box is not the tight box of the mask".into());
        }
        let m = self.marker;
        let mut marker_area = 0;
        for y in m.y0..=m.y1 {
            for x in m.x0..=m.x1 {
                if !self.mask[y * IMAGE_SIZE + x] {
                    return fail("marker leaves the mask".into());
                }
                marker_area += 1;
            }
        }
        if marker_area * 10 > area {
            return fail(format!("marker area {} exceeds 10% of mask area {}", marker_area, area));
        }
        let (cx, cy) = mask_centroid(&self.mask);
        let (mx, my) = ((m.x0 + m.x1) as f64 / 2.0, (m.y0 + m.y1) as f64 / 2.0);
        let dist = ((mx - cx).powi(2) + (my - cy).powi(2)).sqrt();
        if dist < 0.25 * mask_diameter(&self.mask) {
            return fail(format!("marker {:.2} px from centroid, below a quarter of the diameter", dist));
        }
        Ok(())
    }
}

fn mask_centroid(mask: &[bool]) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sx += (i % IMAGE_SIZE) as f64;
        sy += (i / IMAGE_SIZE) as f64;
        n += 1.0;
    }
    (sx / n, sy / n)
}

/// Largest distance between two mask pixels (over the boundary pixels).
fn mask_diameter(mask: &[bool]) -> f64 {
    let at = |x: isize, y: isize| {
        x >= 0
            && y >= 0
            && (x as usize) < IMAGE_SIZE
            && (y as usize) < IMAGE_SIZE
            && mask[y as usize * IMAGE_SIZE + x as usize]
    };
    let boundary: Vec<(f64, f64)> = (0..mask.len())
        .filter(|&i| mask[i])
        .filter_map(|i| {
            let (x, y) = ((i % IMAGE_SIZE) as isize, (i / IMAGE_SIZE) as isize);
            let inner = at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1);
            (!inner).then_some((x as f64, y as f64))
        })
        .collect();
    let mut best: f64 = 0.0;
    for (i, a) in boundary.iter().enumerate() {
        for b in &boundary[i + 1..] {
            best = best.max((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2));
        }
    }
    best.sqrt()
}

/// SplitMix64 finalizer, used to derive per-sample seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_seed(global: u64, id: &str) -> u64 {
    id.bytes().fold(mix(global), |h, b| mix(h ^ b as u64))
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}_{:04}", split.name(), index)
}

fn inside(body: Body, u: f64, v: f64, a: f64, b: f64) -> bool {
    match body {
        Body::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
        Body::Rectangle => u.abs() <= a && v.abs() <= b,
        Body::Triangle => v >= -b && v <= b && u.abs() <= a * (v + b) / (2.0 * b),
        Body::Cross => (u.abs() <= a && v.abs() <= b / 3.0) || (u.abs() <= a / 3.0 && v.abs() <= b),
    }
}

/// Draws one sample. Geometry is resampled until the sample contract holds.
pub fn generate_sample(id: &str, label: usize, global_seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(global_seed, id));
    let n = IMAGE_SIZE;
    for _ in 0..MAX_ATTEMPTS {
        let body = BODIES[rng.random_range(0..BODIES.len())];
        let a = rng.random_range(11.0..22.0);
        let b = rng.random_range(11.0..22.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let cx = rng.random_range(20.0..44.0);
        let cy = rng.random_range(20.0..44.0);
        let (sin, cos) = theta.sin_cos();
        let local = |x: usize, y: usize| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            (cos * dx + sin * dy, -sin * dx + cos * dy)
        };
        let mask: Vec<bool> = (0..n * n)
            .map(|i| {
                let (u, v) = local(i % n, i / n);
                inside(body, u, v, a, b)
            })
            .collect();
        // keep a one-pixel margin so the object never touches the border
        let Some(bbox) = BBox::of_mask(&mask, n) else { continue };
        if bbox.x0 == 0 || bbox.y0 == 0 || bbox.x1 == n - 1 || bbox.y1 == n - 1 {
            continue;
        }
        let area = mask.iter().filter(|&&m| m).count();
        if area * 100 < n * n * 10 || area * 100 > n * n * 40 {
            continue;
        }
        let (mcx, mcy) = mask_centroid(&mask);
        let min_dist = 0.3 * mask_diameter(&mask);
        let mut spots = Vec::new();
        for y0 in 0..=n - MARKER_SIZE {
            for x0 in 0..=n - MARKER_SIZE {
                let (mx, my) = (x0 as f64 + 2.0, y0 as f64 + 2.0);
                if ((mx - mcx).powi(2) + (my - mcy).powi(2)).sqrt() < min_dist {
                    continue;
                }
                let fits = (y0..y0 + MARKER_SIZE).all(|y| (x0..x0 + MARKER_SIZE).all(|x| mask[y * n + x]));
                if fits {
                    spots.push((x0, y0));
                }
            }
        }
        if spots.is_empty() {
            continue;
        }
        let (mx0, my0) = spots[rng.random_range(0..spots.len())];
        let marker = BBox::new(mx0, my0, mx0 + MARKER_SIZE - 1, my0 + MARKER_SIZE - 1);

        let base: f64 = rng.random_range(0.25..0.45);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut pixels = vec![0.0; 3 * n * n];
        for i in 0..n * n {
            let (x, y) = (i % n, i / n);
            let rgb = if marker.x0 <= x && x <= marker.x1 && marker.y0 <= y && y <= marker.y1 {
                MARKER_COLORS[label]
            } else if mask[i] {
                // shared stripe texture, following the body's rotation
                let (u, _) = local(x, y);
                let t = 0.5 + 0.5 * (0.9 * u + phase).sin();
                [0.50 + 0.25 * t, 0.42 + 0.22 * t, 0.30 + 0.18 * t]
            } else {
                [base; 3]
            };
            for c in 0..3 {
                let noise = rng.random_range(-0.06..0.06);
                pixels[c * n * n + i] = pnm::quantize(rgb[c] + noise) as f64 / 255.0;
            }
        }
        let sample =
            Sample { id: id.to_string(), label, image: Tensor::new(vec![3, n, n], pixels)?, mask, bbox, marker, body };
        if sample.check().is_ok() {
            return Ok(sample);
        }
    }
    Err(Error::Generation(format!("{}: no feasible geometry after {} attempts", id, MAX_ATTEMPTS)))
}

fn validate(config: &GenConfig) -> Result<()> {
    if config.classes == 0 || config.classes > MAX_CLASSES {
        return Err(Error::Usage(format!("classes must be in 1..={}, got {}", MAX_CLASSES, config.classes)));
    }
    if config.n_train < config.classes || config.n_test < config.classes {
        return Err(Error::Usage(format!(
            "split sizes ({} train, {} test) must be at least the class count {}",
            config.n_train, config.n_test, config.classes
        )));
    }
    Ok(())
}

/// Generates one split in memory. Labels cycle through the classes, so
/// every class count is within one of the others.
pub fn generate_split(config: &GenConfig, split: Split) -> Result<Vec<Sample>> {
    validate(config)?;
    let count = match split {
        Split::Train => config.n_train,
        Split::Test => config.n_test,
    };
    (0..count).into_par_iter().map(|i| generate_sample(&sample_id(split, i), i % config.classes, config.seed)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub label: usize,
    pub body: Body,
    pub image: String,
    pub mask: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub marker: BBox,
    pub image_sha256: String,
    pub mask_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub classes: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub samples: Vec<SampleRecord>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

fn image_pnm(sample: &Sample) -> Pnm {
    let n = IMAGE_SIZE;
    let d = sample.image.data();
    let data = (0..n * n).flat_map(|i| (0..3).map(move |c| pnm::quantize(d[c * n * n + i]))).collect();
    Pnm { width: n, height: n, channels: 3, data }
}

fn mask_pnm(mask: &[bool]) -> Pnm {
    Pnm {
        width: IMAGE_SIZE,
        height: IMAGE_SIZE,
        channels: 1,
        data: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generates both splits into `dir` and returns the manifest written there.
pub fn generate(config: &GenConfig, dir: &Path) -> Result<Manifest> {
    validate(config)?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut samples = Vec::with_capacity(config.n_train + config.n_test);
    for split in [Split::Train, Split::Test] {
        let generated = generate_split(config, split)?;
        let records: Vec<SampleRecord> = generated
            .par_iter()
            .map(|s| {
                let image = format!("images/{}.ppm", s.id);
                let mask = format!("masks/{}.pgm", s.id);
                let image_bytes = pnm::encode(&image_pnm(s));
                let mask_bytes = pnm::encode(&mask_pnm(&s.mask));
                write_file(&dir.join(&image), &image_bytes)?;
                write_file(&dir.join(&mask), &mask_bytes)?;
                Ok(SampleRecord {
                    id: s.id.clone(),
                    split,
                    label: s.label,
                    body: s.body,
                    image,
                    mask,
                    bbox: s.bbox,
                    marker: s.marker,
                    image_sha256: sha256_hex(&image_bytes),
                    mask_sha256: sha256_hex(&mask_bytes),
                })
            })
            .collect::<Result<_>>()?;
        samples.extend(records);
    }
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION,
        classes: config.classes,
        seed: config.seed,
        n_train: config.n_train,
        n_test: config.n_test,
        samples,
    };
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_file(&path, json.as_bytes())?;
    Ok(manifest)
}

/// A manifest on disk; samples are read and verified lazily.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(manifest_path, e.to_string()))?;
        if manifest.generator_version > GENERATOR_VERSION {
            return Err(Error::Version {
                path: manifest_path.to_path_buf(),
                found: manifest.generator_version,
                supported: GENERATOR_VERSION,
            });
        }
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Dataset { root, manifest })
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.manifest.samples.iter().filter(move |r| r.split == split)
    }

    /// Reads and verifies one sample.
    pub fn load_sample(&self, record: &SampleRecord) -> Result<Sample> {
        let read = |rel: &str, sha: &str| -> Result<(PathBuf, Pnm)> {
            let path = self.root.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if sha256_hex(&bytes) != sha {
                // decode first so truncation is reported as such
                pnm::decode(&bytes, &path)?;
                return Err(Error::Checksum { path });
            }
            let img = pnm::decode(&bytes, &path)?;
            Ok((path, img))
        };
        let (ipath, img) = read(&record.image, &record.image_sha256)?;
        let (mpath, mask) = read(&record.mask, &record.mask_sha256)?;
        let n = IMAGE_SIZE;
        if (img.width, img.height, img.channels) != (n, n, 3) {
            return Err(Error::corrupt(&ipath, format!("expected a {}x{} RGB image", n, n)));
        }
        if (mask.width, mask.height, mask.channels) != (n, n, 1) {
            return Err(Error::corrupt(&mpath, format!("expected a {}x{} mask", n, n)));
        }
        let mut pixels = vec![0.0; 3 * n * n];
        for i in 0..n * n {
            for c in 0..3 {
                pixels[c * n * n + i] = img.data[3 * i + c] as f64 / 255.0;
            }
        }
        Ok(Sample {
            id: record.id.clone(),
            label: record.label,
            image: Tensor::new(vec![3, n, n], pixels)?,
            mask: mask.data.iter().map(|&v| v >= 128).collect(),
            bbox: record.bbox,
            marker: record.marker,
            body: record.body,
        })
    }

    /// Samples of one split in manifest order.
    pub fn load(&self, split: Split) -> Result<Vec<Sample>> {
        let records: Vec<&SampleRecord> = self.records(split).collect();
        records.par_iter().map(|r| self.load_sample(r)).collect()
    }
}

pub fn training_pairs(samples: &[Sample]) -> Vec<(Tensor, usize)> {
    samples.iter().map(|s| (s.image.clone(), s.label)).collect()
}

/// Accuracy of a softmax-regression probe that only sees the mean colour of
/// the marker pixels, trained on `train` and scored on `test`.
pub fn marker_probe_accuracy(train: &[Sample], test: &[Sample], classes: usize) -> f64 {
    let features = |s: &Sample| -> [f64; 4] {
        let n = IMAGE_SIZE;
        let m = s.marker;
        let mut f = [0.0, 0.0, 0.0, 1.0];
        let count = (m.area()) as f64;
        for y in m.y0..=m.y1 {
            for x in m.x0..=m.x1 {
                for (c, fc) in f.iter_mut().take(3).enumerate() {
                    *fc += s.image.data()[c * n * n + y * n + x] / count;
                }
            }
        }
        f
    };
    let mut w = vec![[0.0f64; 4]; classes];
    let xs: Vec<([f64; 4], usize)> = train.iter().map(|s| (features(s), s.label)).collect();
    let logits = |w: &[[f64; 4]], x: &[f64; 4]| -> Vec<f64> {
        w.iter().map(|wk| wk.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    for _ in 0..500 {
        let mut grad = vec![[0.0f64; 4]; classes];
        for (x, y) in &xs {
            let s = logits(&w, x);
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
            for k in 0..classes {
                let p = (s[k] - max).exp() / z - f64::from(u8::from(k == *y));
                for j in 0..4 {
                    grad[k][j] += p * x[j] / xs.len() as f64;
                }
            }
        }
        for k in 0..classes {
            for j in 0..4 {
                w[k][j] -= 2.0 * grad[k][j];
            }
        }
    }
    let correct = test.iter().filter(|s| crate::model::argmax(&logits(&w, &features(s))) == s.label).count();
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_satisfy_contract() {
        for i in 0..24 {
            let s = generate_sample(&sample_id(Split::Train, i), i % 4, 7).unwrap();
            s.check().unwrap();
            assert_eq!(s.image.shape(), &[3, 64, 64]);
        }
    }

    #[test]
    fn per_sample_seed_is_stable() {
        let a = generate_sample("train_0003", 1, 11).unwrap();
        let b = generate_sample("train_0003", 1, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_sample("train_0004", 1, 11).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn labels_are_balanced() {
        let cfg = GenConfig { classes: 3, n_train: 10, n_test: 3, seed: 1 };
        let train = generate_split(&cfg, Split::Train).unwrap();
        let mut counts = [0usize; 3];
        train.iter().for_each(|s| counts[s.label] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn config_is_validated() {
        let cfg = GenConfig { classes: 9, ..GenConfig::default() };
        assert!(generate_split(&cfg, Split::Train).is_err());
        let cfg = GenConfig { classes: 4, n_train: 3, n_test: 4, seed: 0 };
        assert!(generate_split(&cfg, Split::Train).is_err());
    }
}
