//! Command-line flags. Each flag overrides the config-file key named in its
//! help text; the dotted key is also accepted as a flag alias.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::config::{parse_arch, Command, FileConfig, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "acnnl",
    version,
    about = "Train convolutional networks in closed form, one layer at a time"
)]
pub struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train a network, save it, and append a metrics line.
    Train(TrainArgs),
    /// Score a saved model on the test split.
    Eval(EvalArgs),
    /// Train once per gamma, sharing the first layer's accumulation.
    SweepGamma(SweepArgs),
    /// Train on N_c samples per class and score on the full test set.
    SmallSample(SmallSampleArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// TOML config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// dataset.kind: mnist, fashion-mnist, cifar10, cifar100.
    #[arg(long = "dataset", alias = "dataset.kind")]
    pub kind: Option<String>,
    /// dataset.dir: directory with the files under their usual names.
    #[arg(long = "data-dir", alias = "dataset.dir")]
    pub data_dir: Option<PathBuf>,
    /// dataset.train_images (repeat or comma-separate for CIFAR-10 batches).
    #[arg(
        long = "train-images",
        alias = "dataset.train_images",
        value_delimiter = ','
    )]
    pub train_images: Vec<PathBuf>,
    /// dataset.train_labels
    #[arg(long = "train-labels", alias = "dataset.train_labels")]
    pub train_labels: Option<PathBuf>,
    /// dataset.test_images
    #[arg(long = "test-images", alias = "dataset.test_images")]
    pub test_images: Option<PathBuf>,
    /// dataset.test_labels
    #[arg(long = "test-labels", alias = "dataset.test_labels")]
    pub test_labels: Option<PathBuf>,
    /// dataset.train_limit: keep the first N training samples.
    #[arg(long = "train-limit", alias = "dataset.train_limit")]
    pub train_limit: Option<usize>,
    /// dataset.fine_labels: CIFAR-100 label granularity.
    #[arg(long = "coarse-labels", action = ArgAction::SetTrue)]
    pub coarse_labels: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Architecture: linear, cnn2, cnn3, cnn4, cnn5 (arch.depth 1-5).
    #[arg(long, value_parser = |s: &str| parse_arch(s).map_err(|e| e.to_string()))]
    pub arch: Option<usize>,
    /// arch.depth
    #[arg(long, alias = "arch.depth", conflicts_with = "arch")]
    pub depth: Option<usize>,
    /// arch.channels: first-layer channel count C.
    #[arg(long, alias = "arch.channels")]
    pub channels: Option<usize>,
    /// train.seed: label-encoder master seed.
    #[arg(long, alias = "train.seed")]
    pub seed: Option<u64>,
    /// train.workers
    #[arg(long, alias = "train.workers")]
    pub workers: Option<usize>,
    /// train.deterministic: fixed merge order, zero model timestamp.
    #[arg(long, alias = "train.deterministic", action = ArgAction::SetTrue)]
    pub deterministic: bool,
    /// train.encoder_scale
    #[arg(long = "encoder-scale", alias = "train.encoder_scale")]
    pub encoder_scale: Option<f64>,
    /// train.bias: append a constant feature to every layer input.
    #[arg(long, alias = "train.bias", action = ArgAction::SetTrue)]
    pub bias: bool,
    /// train.cache: recompute or memory.
    #[arg(long, alias = "train.cache")]
    pub cache: Option<String>,
    /// out.metrics: CSV file to append to.
    #[arg(long, alias = "out.metrics")]
    pub metrics: Option<PathBuf>,
    /// out.report: write the training report here.
    #[arg(long, alias = "out.report")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model_args: ModelArgs,
    /// train.gamma
    #[arg(long, alias = "train.gamma")]
    pub gamma: Option<f64>,
    /// out.model
    #[arg(long, alias = "out.model")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Model file to score.
    #[arg(long, alias = "out.model")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model_args: ModelArgs,
    /// train.gamma as a list, e.g. 1e-5,1e-2,1e2.
    #[arg(long = "gammas", alias = "train.gamma", value_delimiter = ',')]
    pub gammas: Vec<f64>,
    /// out.model: each model is saved with a `-g<gamma>` suffix.
    #[arg(long, alias = "out.model")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SmallSampleArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model_args: ModelArgs,
    /// train.gamma
    #[arg(long, alias = "train.gamma")]
    pub gamma: Option<f64>,
    /// small_sample.n_c, e.g. 10,100,1000.
    #[arg(long = "n-c", alias = "small_sample.n_c", value_delimiter = ',')]
    pub n_c: Vec<usize>,
    /// small_sample.seeds; each seed drives both subsampling and encoding.
    #[arg(long, alias = "small_sample.seeds", value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

fn base(data: DataArgs) -> anyhow::Result<(FileConfig, Overrides)> {
    let file = match &data.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let o = Overrides {
        kind: data.kind,
        data_dir: data.data_dir,
        train_images: data.train_images,
        train_labels: data.train_labels,
        test_images: data.test_images,
        test_labels: data.test_labels,
        train_limit: data.train_limit,
        fine_labels: data.coarse_labels.then_some(false),
        ..Default::default()
    };
    Ok((file, o))
}

fn apply_model(o: &mut Overrides, m: ModelArgs) {
    o.depth = m.arch.or(m.depth);
    o.channels = m.channels;
    o.seed = m.seed;
    o.workers = m.workers;
    o.deterministic = m.deterministic.then_some(true);
    o.encoder_scale = m.encoder_scale;
    o.bias = m.bias.then_some(true);
    o.cache = m.cache;
    o.metrics = m.metrics;
    o.report = m.report;
}

impl Cmd {
    pub fn into_config(self) -> anyhow::Result<RunConfig> {
        match self {
            Cmd::Train(a) => {
                let (file, mut o) = base(a.data)?;
                apply_model(&mut o, a.model_args);
                o.gammas = a.gamma.into_iter().collect();
                o.model = a.model;
                RunConfig::resolve(Command::Train, file, o)
            }
            Cmd::Eval(a) => {
                let (file, mut o) = base(a.data)?;
                o.model = a.model;
                RunConfig::resolve(Command::Eval, file, o)
            }
            Cmd::SweepGamma(a) => {
                let (file, mut o) = base(a.data)?;
                apply_model(&mut o, a.model_args);
                o.gammas = a.gammas;
                o.model = a.model;
                RunConfig::resolve(Command::SweepGamma, file, o)
            }
            Cmd::SmallSample(a) => {
                let (file, mut o) = base(a.data)?;
                apply_model(&mut o, a.model_args);
                o.gammas = a.gamma.into_iter().collect();
                o.n_c = a.n_c;
                o.seeds = a.seeds;
                RunConfig::resolve(Command::SmallSample, file, o)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_valid() {
        Cli::command().debug_assert();
    }

    #[test]
    fn dotted_aliases_parse() {
        let cli = Cli::try_parse_from([
            "acnnl",
            "train",
            "--dataset.kind",
            "mnist",
            "--arch.channels",
            "8",
            "--train.gamma",
            "3",
        ])
        .unwrap();
        let Cmd::Train(a) = cli.command else { panic!() };
        assert_eq!(a.data.kind.as_deref(), Some("mnist"));
        assert_eq!(a.model_args.channels, Some(8));
        assert_eq!(a.gamma, Some(3.0));
    }

    #[test]
    fn gamma_list() {
        let cli = Cli::try_parse_from(["acnnl", "sweep-gamma", "--gammas", "1e-5,100"]).unwrap();
        let Cmd::SweepGamma(a) = cli.command else {
            panic!()
        };
        assert_eq!(a.gammas, vec![1e-5, 100.0]);
    }
}
