//! `bagcams` command-line driver.
//!
//! Every command takes an optional JSON `--config`; explicit flags override
//! its fields, and the effective settings are written to `config.json` in
//! the output directory. Without `--out`, output goes under
//! `$BAGCAMS_OUTPUT_ROOT/<command>` (default root `bagcams-out`).
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
//! single `error: kind=<kind> reason=<text>` line on stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bagcams::cam::ScoreTransform;
use bagcams::data::{self, Dataset, GenConfig, Sample, Split};
use bagcams::error::{Error, Result};
use bagcams::localize::{localize, LocalizeOptions, Method, Scheme};
use bagcams::metrics::{self, EvalReport, GroundTruth, ReportRow};
use bagcams::model::{Network, NetworkSpec, TrainConfig, TrainingMeta};
use bagcams::pnm::{self, Pnm};
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const OUTPUT_ROOT_ENV: &str = "BAGCAMS_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "bagcams", version, about = "CAM-family localization maps and WSOL evaluation")]
struct Cli {
    /// Worker threads for image-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic marker dataset.
    Gen(GenArgs),
    /// Train the classifier on the train split.
    Train(TrainArgs),
    /// Write one heatmap per test image.
    Localize(LocalizeArgs),
    /// Score heatmaps written by `localize`.
    Eval(EvalArgs),
    /// Evaluate a grid of methods and capture layers.
    Compare(CompareArgs),
    /// Time methods per image.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON file with default settings for this command.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Number of classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Training images.
    #[arg(long)]
    n_train: Option<usize>,
    /// Test images.
    #[arg(long)]
    n_test: Option<usize>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory (containing manifest.json).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Passes over the training split.
    #[arg(long)]
    epochs: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum.
    #[arg(long)]
    momentum: Option<f64>,
    /// L2 penalty on weights.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Images per SGD step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct MapArgs {
    /// Dataset directory (containing manifest.json).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Bagging scheme for bagcams-exact: avg, alpha or group.
    #[arg(long)]
    scheme: Option<String>,
    /// Localize the ground-truth class (`gt`) or the predicted one (`predicted`).
    #[arg(long)]
    target: Option<String>,
    /// Gradient source for gradcam, gradcampp and pcs: identity or log-softmax.
    #[arg(long)]
    transform: Option<String>,
    /// Only the first N test images.
    #[arg(long)]
    limit: Option<usize>,
    /// Compute full regional localizers even beyond the size budget.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct LocalizeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    maps: MapArgs,
    /// cam, gradcam, gradcampp, pcs, bagcams-closed or bagcams-exact.
    #[arg(long)]
    method: Option<String>,
    /// Capture layer, e.g. `final` or `block1`.
    #[arg(long)]
    layer: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory (containing manifest.json).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory written by `localize`.
    #[arg(long)]
    maps: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    maps: MapArgs,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated capture layers.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    maps: MapArgs,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Capture layer.
    #[arg(long)]
    layer: Option<String>,
    /// Timed images per method (test images are reused cyclically).
    #[arg(long)]
    images: Option<usize>,
    /// Seed for the per-image method order.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{}", e);
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: kind=usage reason={}", line);
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let reason = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} reason={}", e.kind(), reason);
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Usage("--jobs must be at least 1".into()));
        }
        // a second initialization only happens in-process and keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Localize(a) => cmd_localize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

// ---------------------------------------------------------------------------
// settings

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
            serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {}", p.display(), e)))
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn output_dir(flag: Option<PathBuf>, configured: &mut Option<PathBuf>, command: &str) -> Result<PathBuf> {
    set(configured, flag.map(Some));
    let dir = match configured.clone() {
        Some(d) => d,
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "bagcams-out".into());
            root.join(command)
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    *configured = Some(dir.clone());
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("settings serialize");
    text.push('\n');
    write_text(path, &text)
}

fn required(value: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    value.clone().ok_or_else(|| Error::Usage(format!("missing --{} (flag or config)", name)))
}

fn manifest_path(dir: &Path) -> PathBuf {
    if dir.extension().is_some_and(|e| e == "json") {
        dir.to_path_buf()
    } else {
        dir.join("manifest.json")
    }
}

// ---------------------------------------------------------------------------
// gen

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct GenSettings {
    out: Option<PathBuf>,
    #[serde(flatten)]
    gen: GenConfig,
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut s: GenSettings = load_config(a.common.config.as_deref())?;
    set(&mut s.gen.classes, a.classes);
    set(&mut s.gen.n_train, a.n_train);
    set(&mut s.gen.n_test, a.n_test);
    set(&mut s.gen.seed, a.seed);
    let out = output_dir(a.common.out, &mut s.out, "gen")?;
    let manifest = data::generate(&s.gen, &out)?;
    write_json(&out.join("config.json"), &s)?;
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainSettings {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    #[serde(flatten)]
    train: TrainConfig,
    /// Network description; the default network is used when absent.
    network: Option<NetworkSpec>,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    losses: Vec<f64>,
    train_accuracy: f64,
    test_accuracy: f64,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut s: TrainSettings = load_config(a.common.config.as_deref())?;
    set(&mut s.data, a.data.map(Some));
    set(&mut s.train.epochs, a.epochs);
    set(&mut s.train.lr, a.lr);
    set(&mut s.train.momentum, a.momentum);
    set(&mut s.train.weight_decay, a.weight_decay);
    set(&mut s.train.batch_size, a.batch_size);
    set(&mut s.train.seed, a.seed);
    let data_dir = required(&s.data, "data")?;
    let out = output_dir(a.common.out, &mut s.out, "train")?;

    let dataset = Dataset::open(&manifest_path(&data_dir))?;
    let spec = s.network.clone().unwrap_or_else(|| NetworkSpec::default_for(dataset.manifest.classes));
    if spec.classes != dataset.manifest.classes {
        return Err(Error::Usage(format!(
            "network has {} classes, dataset has {}",
            spec.classes, dataset.manifest.classes
        )));
    }
    s.network = Some(spec.clone());
    let train = data::training_pairs(&dataset.load(Split::Train)?);
    let test = data::training_pairs(&dataset.load(Split::Test)?);
    let mut net = Network::init(spec, s.train.seed)?;
    let report = net.train(&train, &s.train)?;
    let meta = TrainingMeta { epochs: s.train.epochs, seed: s.train.seed, final_loss: report.losses.last().copied() };
    net.save_checkpoint(&out.join("model.ckpt"), &meta)?;
    let summary = TrainSummary {
        losses: report.losses,
        train_accuracy: report.train_accuracy,
        test_accuracy: net.accuracy(&test)?,
    };
    write_json(&out.join("train.json"), &summary)?;
    write_json(&out.join("config.json"), &s)?;
    println!(
        "trained {} epochs: train accuracy {:.4}, test accuracy {:.4}",
        s.train.epochs, summary.train_accuracy, summary.test_accuracy
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared map settings

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Target {
    #[default]
    Gt,
    Predicted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MapSettings {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    scheme: Scheme,
    target: Target,
    transform: ScoreTransform,
    limit: Option<usize>,
    force: bool,
}

impl Default for MapSettings {
    fn default() -> Self {
        MapSettings {
            data: None,
            checkpoint: None,
            scheme: Scheme::Group,
            target: Target::Gt,
            transform: ScoreTransform::Identity,
            limit: None,
            force: false,
        }
    }
}

impl MapSettings {
    fn apply(&mut self, a: MapArgs) -> Result<()> {
        set(&mut self.data, a.data.map(Some));
        set(&mut self.checkpoint, a.checkpoint.map(Some));
        if let Some(s) = a.scheme {
            self.scheme = s.parse()?;
        }
        if let Some(t) = a.target {
            self.target = match t.as_str() {
                "gt" => Target::Gt,
                "predicted" => Target::Predicted,
                other => return Err(Error::Usage(format!("unknown target `{}` (valid: gt, predicted)", other))),
            };
        }
        if let Some(t) = a.transform {
            self.transform = match t.as_str() {
                "identity" => ScoreTransform::Identity,
                "log-softmax" => ScoreTransform::LogSoftmax,
                other => {
                    return Err(Error::Usage(format!("unknown transform `{}` (valid: identity, log-softmax)", other)))
                }
            };
        }
        set(&mut self.limit, a.limit.map(Some));
        self.force |= a.force;
        Ok(())
    }

    fn options(&self) -> LocalizeOptions {
        LocalizeOptions { scheme: self.scheme, force: self.force, baseline_transform: self.transform }
    }

    fn open(&self) -> Result<(Dataset, Network, Vec<Sample>)> {
        let dataset = Dataset::open(&manifest_path(&required(&self.data, "data")?))?;
        let (net, _) = Network::load_checkpoint(&required(&self.checkpoint, "checkpoint")?)?;
        let mut samples = dataset.load(Split::Test)?;
        if let Some(n) = self.limit {
            samples.truncate(n);
        }
        Ok((dataset, net, samples))
    }

    fn class_for(&self, sample: &Sample) -> Option<usize> {
        match self.target {
            Target::Gt => Some(sample.label),
            Target::Predicted => None,
        }
    }
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    names.iter().map(|n| n.parse()).collect()
}

/// Rejects unknown layer names before any work starts.
fn check_layer(net: &Network, layer: &str) -> Result<()> {
    net.spec().capture(layer).map(|_| ())
}

/// Report label: method name, with the scheme appended for non-default bagging.
fn method_label(method: Method, scheme: Scheme) -> String {
    if method == Method::BagCamsExact && scheme != Scheme::Group {
        format!("{}-{}", method.name(), scheme.name())
    } else {
        method.name().to_string()
    }
}

struct ComputedMap {
    values: Vec<f64>,
    class: usize,
    predicted: usize,
}

fn compute_maps(
    net: &Network,
    samples: &[Sample],
    layer: &str,
    method: Method,
    s: &MapSettings,
) -> Result<Vec<ComputedMap>> {
    samples
        .par_iter()
        .map(|sample| {
            let out = localize(net, &sample.image, layer, method, s.class_for(sample), s.options())?;
            Ok(ComputedMap { values: out.map.values, class: out.class, predicted: out.predicted })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// localize

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct LocalizeSettings {
    out: Option<PathBuf>,
    #[serde(flatten)]
    maps: MapSettings,
    method: Method,
    layer: String,
}

impl Default for LocalizeSettings {
    fn default() -> Self {
        LocalizeSettings {
            out: None,
            maps: MapSettings::default(),
            method: Method::BagCamsExact,
            layer: "final".into(),
        }
    }
}

/// Sidecar written next to every heatmap.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    id: String,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    #[serde(rename = "K")]
    classes: usize,
    method: Method,
    scheme: Scheme,
    layer: String,
    class: usize,
    predicted: usize,
    label: usize,
}

fn cmd_localize(a: LocalizeArgs) -> Result<()> {
    let mut s: LocalizeSettings = load_config(a.common.config.as_deref())?;
    s.maps.apply(a.maps)?;
    if let Some(m) = a.method {
        s.method = m.parse()?;
    }
    set(&mut s.layer, a.layer);
    let (_, net, samples) = s.maps.open()?;
    check_layer(&net, &s.layer)?;
    let out = output_dir(a.common.out, &mut s.out, "localize")?;

    let maps = compute_maps(&net, &samples, &s.layer, s.method, &s.maps)?;
    let input = net.spec().input;
    samples.par_iter().zip(&maps).try_for_each(|(sample, m)| -> Result<()> {
        let (h, w) = (input.height, input.width);
        let gray = Pnm { width: w, height: h, channels: 1, data: m.values.iter().map(|&v| pnm::quantize(v)).collect() };
        pnm::write(&out.join(format!("{}.pgm", sample.id)), &gray)?;
        let raw: Vec<u8> = m.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let raw_path = out.join(format!("{}.f64", sample.id));
        std::fs::write(&raw_path, raw).map_err(|e| Error::Io { path: raw_path, source: e })?;
        let sidecar = Sidecar {
            id: sample.id.clone(),
            height: h,
            width: w,
            classes: net.classes(),
            method: s.method,
            scheme: s.maps.scheme,
            layer: s.layer.clone(),
            class: m.class,
            predicted: m.predicted,
            label: sample.label,
        };
        write_json(&out.join(format!("{}.json", sample.id)), &sidecar)
    })?;
    write_json(&out.join("config.json"), &s)?;
    println!("wrote {} {} maps at {} to {}", maps.len(), s.method, s.layer, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    data: Option<PathBuf>,
    maps: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn read_map(dir: &Path, side: &Sidecar) -> Result<Vec<f64>> {
    let path = dir.join(format!("{}.f64", side.id));
    let bytes = std::fs::read(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    if bytes.len() != 8 * side.height * side.width {
        return Err(Error::Corrupt {
            path,
            reason: format!("expected {} values, found {} bytes", side.height * side.width, bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut s: EvalSettings = load_config(a.common.config.as_deref())?;
    set(&mut s.data, a.data.map(Some));
    set(&mut s.maps, a.maps.map(Some));
    let dataset = Dataset::open(&manifest_path(&required(&s.data, "data")?))?;
    let maps_dir = required(&s.maps, "maps")?;
    let out = output_dir(a.common.out, &mut s.out, "eval")?;

    let samples = dataset.load(Split::Test)?;
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|x| (x.id.as_str(), x)).collect();
    // group sidecars by (method, scheme, layer); images in manifest order
    let mut groups: BTreeMap<(usize, String, String), Vec<(usize, Sidecar)>> = BTreeMap::new();
    let order: BTreeMap<&str, usize> = samples.iter().enumerate().map(|(i, x)| (x.id.as_str(), i)).collect();
    let entries = std::fs::read_dir(&maps_dir).map_err(|e| Error::Io { path: maps_dir.clone(), source: e })?;
    for entry in entries {
        let path = entry.map_err(|e| Error::Io { path: maps_dir.clone(), source: e })?.path();
        if path.extension().is_none_or(|e| e != "json") || path.file_name().is_some_and(|n| n == "config.json") {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        let side: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::Corrupt { path: path.clone(), reason: e.to_string() })?;
        let Some(&idx) = order.get(side.id.as_str()) else {
            return Err(Error::InvalidData(format!("map {} has no test sample in the dataset", side.id)));
        };
        let rank = Method::ALL.iter().position(|m| *m == side.method).unwrap_or(0);
        groups.entry((rank, method_label(side.method, side.scheme), side.layer.clone())).or_default().push((idx, side));
    }
    if groups.is_empty() {
        return Err(Error::InvalidData(format!("no heatmaps found in {}", maps_dir.display())));
    }

    let mut report = EvalReport { images: 0, rows: Vec::new() };
    for ((_, label, layer), mut members) in groups {
        members.sort_by_key(|(i, _)| *i);
        let mut maps = Vec::with_capacity(members.len());
        let mut gts: Vec<GroundTruth> = Vec::with_capacity(members.len());
        let mut predicted = Vec::with_capacity(members.len());
        for (_, side) in &members {
            maps.push(read_map(&maps_dir, side)?);
            gts.push(by_id[side.id.as_str()].ground_truth());
            predicted.push(side.predicted);
        }
        report.images = report.images.max(maps.len());
        let scores = metrics::evaluate(&maps, &gts, &predicted)?;
        report.rows.push(ReportRow { method: label, layer, scores, seconds_per_image: None });
    }
    write_text(&out.join("report.json"), &report.to_json())?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    write_json(&out.join("config.json"), &s)?;
    print!("{}", report.to_csv());
    Ok(())
}

// ---------------------------------------------------------------------------
// compare

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct CompareSettings {
    out: Option<PathBuf>,
    #[serde(flatten)]
    maps: MapSettings,
    methods: Vec<Method>,
    layers: Vec<String>,
}

impl Default for CompareSettings {
    fn default() -> Self {
        CompareSettings {
            out: None,
            maps: MapSettings::default(),
            methods: Method::ALL.to_vec(),
            layers: vec!["final".into()],
        }
    }
}

#[derive(Debug, Serialize)]
struct Skipped {
    method: String,
    layer: String,
    reason: String,
}

#[derive(Debug, Serialize)]
struct CompareReport {
    #[serde(flatten)]
    report: EvalReport,
    skipped: Vec<Skipped>,
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let mut s: CompareSettings = load_config(a.common.config.as_deref())?;
    s.maps.apply(a.maps)?;
    if let Some(m) = a.methods {
        s.methods = parse_methods(&m)?;
    }
    set(&mut s.layers, a.layers);
    let (_, net, samples) = s.maps.open()?;
    for layer in &s.layers {
        check_layer(&net, layer)?;
    }
    let out = output_dir(a.common.out, &mut s.out, "compare")?;
    let gts: Vec<GroundTruth> = samples.iter().map(Sample::ground_truth).collect();

    let mut report = EvalReport { images: samples.len(), rows: Vec::new() };
    let mut skipped = Vec::new();
    for &method in &s.methods {
        for layer in &s.layers {
            let label = method_label(method, s.maps.scheme);
            match compute_maps(&net, &samples, layer, method, &s.maps) {
                Ok(maps) => {
                    let predicted: Vec<usize> = maps.iter().map(|m| m.predicted).collect();
                    let values: Vec<Vec<f64>> = maps.into_iter().map(|m| m.values).collect();
                    let scores = metrics::evaluate(&values, &gts, &predicted)?;
                    report.rows.push(ReportRow {
                        method: label,
                        layer: layer.clone(),
                        scores,
                        seconds_per_image: None,
                    });
                }
                // methods that cannot run at a layer leave an empty cell
                Err(e @ (Error::CamChannels { .. } | Error::Budget { .. })) => {
                    skipped.push(Skipped { method: label, layer: layer.clone(), reason: e.to_string() });
                }
                Err(e) => return Err(e),
            }
        }
    }

    let mut table = String::from("method");
    for layer in &s.layers {
        table.push(',');
        table.push_str(layer);
    }
    table.push('\n');
    for &method in &s.methods {
        let label = method_label(method, s.maps.scheme);
        table.push_str(&label);
        for layer in &s.layers {
            table.push(',');
            if let Some(r) = report.rows.iter().find(|r| r.method == label && &r.layer == layer) {
                table.push_str(&format!("{:.2}", r.scores.pxap * 100.0));
            }
        }
        table.push('\n');
    }
    write_text(&out.join("compare.csv"), &report.to_csv())?;
    write_text(&out.join("pxap_by_layer.csv"), &table)?;
    write_json(&out.join("compare.json"), &CompareReport { report, skipped })?;
    write_json(&out.join("config.json"), &s)?;
    print!("{}", table);
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct BenchSettings {
    out: Option<PathBuf>,
    #[serde(flatten)]
    maps: MapSettings,
    methods: Vec<Method>,
    layer: String,
    images: usize,
    seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            out: None,
            maps: MapSettings::default(),
            methods: vec![Method::Cam, Method::GradCam, Method::GradCamPlusPlus, Method::Pcs, Method::BagCamsClosed],
            layer: "final".into(),
            images: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub images: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    /// Coefficient of variation of the per-image time.
    pub cv: f64,
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut s: BenchSettings = load_config(a.common.config.as_deref())?;
    s.maps.apply(a.maps)?;
    if let Some(m) = a.methods {
        s.methods = parse_methods(&m)?;
    }
    set(&mut s.layer, a.layer);
    set(&mut s.images, a.images);
    set(&mut s.seed, a.seed);
    if s.images < 100 {
        return Err(Error::Usage(format!("bench needs at least 100 images, got {}", s.images)));
    }
    if s.methods.is_empty() {
        return Err(Error::Usage("no methods to time".into()));
    }
    let (_, net, samples) = s.maps.open()?;
    check_layer(&net, &s.layer)?;
    if samples.is_empty() {
        return Err(Error::InvalidData("no test images".into()));
    }
    let out = output_dir(a.common.out, &mut s.out, "bench")?;

    // every image is timed under every method, in a shuffled method order
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut times = vec![Vec::with_capacity(s.images); s.methods.len()];
    let mut order: Vec<usize> = (0..s.methods.len()).collect();
    for i in 0..s.images {
        let sample = &samples[i % samples.len()];
        order.shuffle(&mut rng);
        for &m in &order {
            let start = Instant::now();
            localize(&net, &sample.image, &s.layer, s.methods[m], s.maps.class_for(sample), s.maps.options())?;
            times[m].push(start.elapsed().as_secs_f64());
        }
    }
    let rows: Vec<BenchRow> = s
        .methods
        .iter()
        .zip(&times)
        .map(|(&method, t)| {
            let n = t.len() as f64;
            let mean = t.iter().sum::<f64>() / n;
            let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            BenchRow {
                method: method_label(method, s.maps.scheme),
                images: t.len(),
                mean_seconds: mean,
                std_seconds: var.sqrt(),
                cv: var.sqrt() / mean,
            }
        })
        .collect();
    let mut csv = String::from("method,images,mean_seconds,std_seconds,cv,images_per_second\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.6e},{:.6e},{:.4},{:.2}\n",
            r.method,
            r.images,
            r.mean_seconds,
            r.std_seconds,
            r.cv,
            1.0 / r.mean_seconds
        ));
    }
    write_json(&out.join("bench.json"), &rows)?;
    write_text(&out.join("bench.csv"), &csv)?;
    write_json(&out.join("config.json"), &s)?;
    print!("{}", csv);
    Ok(())
}
