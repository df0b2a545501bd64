//! Run configuration: a TOML file whose keys the command-line flags mirror.
//! Flags win over the file; anything unset falls back to a default.

use std::fs;
use std::path::{Path, PathBuf};

use acnnl::trainer::LayerCache;
use serde::Deserialize;

/// Problems with the invocation itself; these exit with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn parse(s: &str) -> anyhow::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Self::Mnist),
            "fashion-mnist" | "fashion_mnist" | "fmnist" => Ok(Self::FashionMnist),
            "cifar10" | "cifar-10" => Ok(Self::Cifar10),
            "cifar100" | "cifar-100" => Ok(Self::Cifar100),
            other => usage(format!(
                "unknown dataset kind '{other}' (mnist, fashion-mnist, cifar10, cifar100)"
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::FashionMnist => "fashion-mnist",
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
        }
    }

    fn is_idx(self) -> bool {
        matches!(self, Self::Mnist | Self::FashionMnist)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            Self::One(v) => vec![v],
            Self::Many(v) => v,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub out: OutSection,
    #[serde(default)]
    pub small_sample: SmallSampleSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: Option<String>,
    /// Directory holding the files under their distribution names.
    pub dir: Option<PathBuf>,
    /// For CIFAR-10 a list of batch files.
    pub train_images: Option<OneOrMany<PathBuf>>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Keep only the first N training samples.
    pub train_limit: Option<usize>,
    /// CIFAR-100 fine (100) or coarse (20) labels.
    pub fine_labels: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    /// Trainable layers, 1 (linear) to 5.
    pub depth: Option<usize>,
    pub channels: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub gamma: Option<OneOrMany<f64>>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub deterministic: Option<bool>,
    pub encoder_scale: Option<f64>,
    pub bias: Option<bool>,
    /// "recompute" or "memory".
    pub cache: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutSection {
    pub model: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmallSampleSection {
    pub n_c: Option<OneOrMany<usize>>,
    pub seeds: Option<OneOrMany<u64>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return usage(format!("cannot read config {}: {e}", path.display())),
        };
        match toml::from_str(&text) {
            Ok(c) => Ok(c),
            Err(e) => usage(format!("invalid config {}: {e}", path.display())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    SweepGamma,
    SmallSample,
}

/// Fully resolved settings for one invocation.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: Command,
    pub kind: DatasetKind,
    pub train_paths: Vec<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_paths: Vec<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub fine_labels: bool,
    pub depth: usize,
    pub channels: usize,
    pub gammas: Vec<f64>,
    pub seed: u64,
    pub workers: usize,
    pub deterministic: bool,
    pub encoder_scale: f64,
    pub bias: bool,
    pub cache: LayerCache,
    pub model: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub n_c: Vec<usize>,
    pub seeds: Vec<u64>,
}

pub const DEFAULT_DEPTH: usize = 5;
pub const DEFAULT_CHANNELS: usize = 16;

pub fn parse_arch(s: &str) -> anyhow::Result<usize> {
    match s.to_ascii_lowercase().as_str() {
        "linear" | "mlp" => Ok(1),
        "cnn2" | "cnn-2" => Ok(2),
        "cnn3" | "cnn-3" => Ok(3),
        "cnn4" | "cnn-4" => Ok(4),
        "cnn5" | "cnn-5" => Ok(5),
        other => usage(format!(
            "unknown architecture '{other}' (linear, cnn2 .. cnn5)"
        )),
    }
}

fn parse_cache(s: &str) -> anyhow::Result<LayerCache> {
    match s {
        "recompute" => Ok(LayerCache::Recompute),
        "memory" => Ok(LayerCache::Memory),
        other => usage(format!("unknown cache mode '{other}' (recompute, memory)")),
    }
}

type DataPaths = (Vec<PathBuf>, Option<PathBuf>, Vec<PathBuf>, Option<PathBuf>);

fn standard_paths(kind: DatasetKind, dir: &Path) -> DataPaths {
    match kind {
        DatasetKind::Mnist | DatasetKind::FashionMnist => (
            vec![dir.join("train-images-idx3-ubyte")],
            Some(dir.join("train-labels-idx1-ubyte")),
            vec![dir.join("t10k-images-idx3-ubyte")],
            Some(dir.join("t10k-labels-idx1-ubyte")),
        ),
        DatasetKind::Cifar10 => (
            (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect(),
            None,
            vec![dir.join("test_batch.bin")],
            None,
        ),
        DatasetKind::Cifar100 => (
            vec![dir.join("train.bin")],
            None,
            vec![dir.join("test.bin")],
            None,
        ),
    }
}

/// Values given on the command line, each overriding the matching file key.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub kind: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub train_images: Vec<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub fine_labels: Option<bool>,
    pub depth: Option<usize>,
    pub channels: Option<usize>,
    pub gammas: Vec<f64>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub deterministic: Option<bool>,
    pub encoder_scale: Option<f64>,
    pub bias: Option<bool>,
    pub cache: Option<String>,
    pub model: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub n_c: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn resolve(command: Command, file: FileConfig, o: Overrides) -> anyhow::Result<Self> {
        let d = file.dataset;
        let Some(kind) = o.kind.or(d.kind) else {
            return usage("no dataset kind given (--dataset or dataset.kind)");
        };
        let kind = DatasetKind::parse(&kind)?;
        let fine_labels = o.fine_labels.or(d.fine_labels).unwrap_or(true);

        let (mut train_paths, mut train_labels, mut test_paths, mut test_labels) =
            match o.data_dir.or(d.dir) {
                Some(dir) => standard_paths(kind, &dir),
                None => (Vec::new(), None, Vec::new(), None),
            };
        let file_train = d.train_images.map(OneOrMany::into_vec).unwrap_or_default();
        if !o.train_images.is_empty() {
            train_paths = o.train_images;
        } else if !file_train.is_empty() {
            train_paths = file_train;
        }
        if let Some(p) = o.train_labels.or(d.train_labels) {
            train_labels = Some(p);
        }
        if let Some(p) = o.test_images.or(d.test_images) {
            test_paths = vec![p];
        }
        if let Some(p) = o.test_labels.or(d.test_labels) {
            test_labels = Some(p);
        }

        let needs_train = command != Command::Eval;
        if needs_train {
            if train_paths.is_empty() {
                return usage("no training data given (--data-dir or --train-images)");
            }
            if kind.is_idx() && train_labels.is_none() {
                return usage("IDX datasets need --train-labels");
            }
        }
        if test_paths.is_empty() {
            return usage("no test data given (--data-dir or --test-images)");
        }
        if kind.is_idx() && test_labels.is_none() {
            return usage("IDX datasets need --test-labels");
        }
        let mut must_exist: Vec<&PathBuf> = test_paths.iter().chain(test_labels.iter()).collect();
        if needs_train {
            must_exist.extend(train_paths.iter().chain(train_labels.iter()));
        }
        for p in must_exist {
            if !p.is_file() {
                return usage(format!("dataset file not found: {}", p.display()));
            }
        }

        let depth = o.depth.or(file.arch.depth).unwrap_or(DEFAULT_DEPTH);
        if !(1..=5).contains(&depth) {
            return usage(format!("arch.depth must be between 1 and 5, got {depth}"));
        }
        let channels = o
            .channels
            .or(file.arch.channels)
            .unwrap_or(DEFAULT_CHANNELS);
        if channels == 0 {
            return usage("arch.channels must be positive");
        }

        let t = file.train;
        let gammas = if o.gammas.is_empty() {
            t.gamma
                .map(OneOrMany::into_vec)
                .unwrap_or_else(|| vec![100.0])
        } else {
            o.gammas
        };
        if gammas.is_empty() {
            return usage("empty gamma list");
        }
        if matches!(command, Command::Train | Command::SmallSample) && gammas.len() != 1 {
            return usage("a gamma list is only accepted by sweep-gamma");
        }
        if let Some(g) = gammas.iter().find(|g| **g < 0.0 || !g.is_finite()) {
            return usage(format!("gamma must be finite and >= 0, got {g}"));
        }
        let workers = o.workers.or(t.workers).unwrap_or(1);
        if workers == 0 {
            return usage("train.workers must be at least 1");
        }
        let cache = match o.cache.or(t.cache) {
            Some(s) => parse_cache(&s)?,
            None => LayerCache::Recompute,
        };

        let ss = file.small_sample;
        let file_n_c = ss.n_c.map(OneOrMany::into_vec).unwrap_or_default();
        let n_c = if o.n_c.is_empty() { file_n_c } else { o.n_c };
        let seed = o.seed.or(t.seed).unwrap_or(0);
        let file_seeds = ss.seeds.map(OneOrMany::into_vec).unwrap_or_default();
        let seeds = if !o.seeds.is_empty() {
            o.seeds
        } else if !file_seeds.is_empty() {
            file_seeds
        } else {
            vec![seed]
        };
        match command {
            Command::SmallSample if n_c.is_empty() => {
                return usage("small-sample needs --n-c or small_sample.n_c");
            }
            Command::SmallSample => {}
            _ if !n_c.is_empty() => return usage("n_c is only accepted by small-sample"),
            _ => {}
        }
        if n_c.contains(&0) {
            return usage("n_c values must be positive");
        }

        Ok(Self {
            command,
            kind,
            train_paths,
            train_labels,
            test_paths,
            test_labels,
            train_limit: o.train_limit.or(d.train_limit),
            fine_labels,
            depth,
            channels,
            gammas,
            seed,
            workers,
            deterministic: o.deterministic.or(t.deterministic).unwrap_or(false),
            encoder_scale: o.encoder_scale.or(t.encoder_scale).unwrap_or(1.0),
            bias: o.bias.or(t.bias).unwrap_or(false),
            cache,
            model: o.model.or(file.out.model),
            metrics: o.metrics.or(file.out.metrics),
            report: o.report.or(file.out.report),
            n_c,
            seeds,
        })
    }

    pub fn arch_name(&self) -> String {
        if self.depth == 1 {
            "linear".into()
        } else {
            format!("cnn{}", self.depth)
        }
    }
}
