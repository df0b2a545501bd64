use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use acnnl::data::{load_cifar10, load_cifar100, load_idx, subsample_per_class, Dataset};
use acnnl::model_io::{load_model, save_model};
use acnnl::network::{build_cnn, build_linear, NetworkSpec, TrainedNetwork};
use acnnl::trainer::{
    evaluate, train_gamma_sweep, train_with_report, Evaluation, TrainConfig, TrainingReport,
};
use anyhow::{bail, Context};
use log::info;

use crate::config::{Command, DatasetKind, RunConfig};
use crate::metrics::{self, MetricsRecord};

const DEFAULT_METRICS: &str = "runs/metrics.csv";

fn load_split(
    cfg: &RunConfig,
    images: &[PathBuf],
    labels: Option<&PathBuf>,
) -> anyhow::Result<Dataset> {
    let t = Instant::now();
    let d = match cfg.kind {
        DatasetKind::Mnist | DatasetKind::FashionMnist => {
            let [img] = images else {
                bail!(
                    "IDX datasets take exactly one image file, got {}",
                    images.len()
                );
            };
            let lab = labels.context("missing label file")?;
            load_idx(img, lab)?
        }
        DatasetKind::Cifar10 => load_cifar10(images)?,
        DatasetKind::Cifar100 => {
            let [p] = images else {
                bail!(
                    "CIFAR-100 takes exactly one file per split, got {}",
                    images.len()
                );
            };
            load_cifar100(p, cfg.fine_labels)?
        }
    };
    info!(
        "loaded {} samples in {:.1}s",
        d.len(),
        t.elapsed().as_secs_f64()
    );
    Ok(d)
}

pub fn load_train(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let d = load_split(cfg, &cfg.train_paths, cfg.train_labels.as_ref())?;
    Ok(match cfg.train_limit {
        Some(n) => d.head(n),
        None => d,
    })
}

pub fn load_test(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    load_split(cfg, &cfg.test_paths, cfg.test_labels.as_ref())
}

pub fn build_spec(cfg: &RunConfig, d: &Dataset) -> anyhow::Result<NetworkSpec> {
    let dims = d.dims().context("training set is empty")?;
    Ok(if cfg.depth == 1 {
        build_linear(dims, d.classes())?
    } else {
        build_cnn(cfg.depth, cfg.channels, dims, d.classes())?
    })
}

pub fn train_config(cfg: &RunConfig, gamma: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        gamma,
        encoder_seed: seed,
        encoder_scale: cfg.encoder_scale,
        bias: cfg.bias,
        deterministic: cfg.deterministic,
        workers: cfg.workers,
        layer_cache: cfg.cache,
    }
}

fn run_id(cfg: &RunConfig, d: &Dataset, gamma: f64, seed: u64, n_c: Option<usize>) -> String {
    metrics::run_id(&[
        cfg.kind.name(),
        &format!("{:016x}", d.fingerprint()),
        &cfg.depth.to_string(),
        &cfg.channels.to_string(),
        &format!("{gamma:e}"),
        &seed.to_string(),
        &n_c.map_or_else(String::new, |n| n.to_string()),
        &format!("{:e}", cfg.encoder_scale),
        &cfg.bias.to_string(),
        &cfg.workers.to_string(),
    ])
}

fn save(net: &TrainedNetwork, path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    save_model(net, &mut w)?;
    w.flush()?;
    Ok(())
}

fn record(cfg: &RunConfig, rec: &MetricsRecord) -> anyhow::Result<()> {
    let path = cfg
        .metrics
        .clone()
        .unwrap_or_else(|| DEFAULT_METRICS.into());
    metrics::append(&path, rec).with_context(|| format!("appending to {}", path.display()))?;
    println!("{}", metrics::HEADER);
    println!("{}", rec.to_line());
    Ok(())
}

fn write_report(cfg: &RunConfig, report: &TrainingReport) -> anyhow::Result<()> {
    println!("{report}");
    if let Some(p) = &cfg.report {
        fs::write(p, format!("{report}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

struct Scored {
    train: Evaluation,
    test: Evaluation,
}

fn score(net: &TrainedNetwork, train: &Dataset, test: &Dataset) -> anyhow::Result<Scored> {
    Ok(Scored {
        train: evaluate(net, train)?,
        test: evaluate(net, test)?,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let start = Instant::now();
    let train = load_train(cfg)?;
    let test = load_test(cfg)?;
    let spec = build_spec(cfg, &train)?;
    let gamma = cfg.gammas[0];
    let (net, report) = train_with_report(&train, &spec, &train_config(cfg, gamma, cfg.seed))?;
    let s = score(&net, &train, &test)?;
    write_report(cfg, &report)?;
    let id = run_id(cfg, &train, gamma, cfg.seed, None);
    let model = cfg
        .model
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{id}.acnl")));
    save(&net, &model)?;
    println!("model={}", model.display());
    record(
        cfg,
        &MetricsRecord {
            run_id: id,
            dataset: cfg.kind.name().into(),
            depth: cfg.depth,
            channels: cfg.channels,
            gamma,
            seed: cfg.seed,
            n_c: None,
            train_acc: s.train.accuracy,
            test_acc: s.test.accuracy,
            wall_s: start.elapsed().as_secs_f64(),
        },
    )
}

pub fn cmd_eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let Some(path) = &cfg.model else {
        return Err(crate::config::UsageError("eval needs --model".into()).into());
    };
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let net = load_model(&mut BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))?;
    let test = load_test(cfg)?;
    let e = evaluate(&net, &test)?;
    println!("accuracy={}", e.accuracy);
    println!(
        "per_class={}",
        join(e.per_class.iter().map(|v| format!("{v:.4}")))
    );
    println!("confusion (rows true, columns predicted):");
    for row in &e.confusion {
        println!("{}", join(row.iter().map(|v| v.to_string())));
    }
    Ok(())
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(",")
}

fn suffixed(path: &Path, gamma: f64) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let ext = path
        .extension()
        .map_or_else(String::new, |e| format!(".{}", e.to_string_lossy()));
    path.with_file_name(format!("{stem}-g{gamma:e}{ext}"))
}

pub fn cmd_sweep_gamma(cfg: &RunConfig) -> anyhow::Result<()> {
    let train = load_train(cfg)?;
    let test = load_test(cfg)?;
    let spec = build_spec(cfg, &train)?;
    let runs = train_gamma_sweep(
        &train,
        &spec,
        &train_config(cfg, cfg.gammas[0], cfg.seed),
        &cfg.gammas,
    )?;
    for (&gamma, (net, report)) in cfg.gammas.iter().zip(&runs) {
        let t = Instant::now();
        let s = score(net, &train, &test)?;
        write_report(cfg, report)?;
        if let Some(p) = &cfg.model {
            save(net, &suffixed(p, gamma))?;
        }
        record(
            cfg,
            &MetricsRecord {
                run_id: run_id(cfg, &train, gamma, cfg.seed, None),
                dataset: cfg.kind.name().into(),
                depth: cfg.depth,
                channels: cfg.channels,
                gamma,
                seed: cfg.seed,
                n_c: None,
                train_acc: s.train.accuracy,
                test_acc: s.test.accuracy,
                wall_s: report.wall_seconds + t.elapsed().as_secs_f64(),
            },
        )?;
    }
    Ok(())
}

pub fn cmd_small_sample(cfg: &RunConfig) -> anyhow::Result<()> {
    let full = load_train(cfg)?;
    let test = load_test(cfg)?;
    let spec = build_spec(cfg, &full)?;
    let gamma = cfg.gammas[0];
    let mut summary = Vec::new();
    for &n_c in &cfg.n_c {
        let mut accs = Vec::new();
        for &seed in &cfg.seeds {
            let start = Instant::now();
            let subset = subsample_per_class(&full, n_c, seed)?;
            let (net, _) = train_with_report(&subset, &spec, &train_config(cfg, gamma, seed))?;
            let s = score(&net, &subset, &test)?;
            accs.push(s.test.accuracy);
            record(
                cfg,
                &MetricsRecord {
                    run_id: run_id(cfg, &subset, gamma, seed, Some(n_c)),
                    dataset: cfg.kind.name().into(),
                    depth: cfg.depth,
                    channels: cfg.channels,
                    gamma,
                    seed,
                    n_c: Some(n_c),
                    train_acc: s.train.accuracy,
                    test_acc: s.test.accuracy,
                    wall_s: start.elapsed().as_secs_f64(),
                },
            )?;
        }
        summary.push((n_c, accs.iter().sum::<f64>() / accs.len() as f64));
    }
    println!("n_c,mean_test_acc");
    for (n_c, mean) in summary {
        println!("{n_c},{mean}");
    }
    Ok(())
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<()> {
    match cfg.command {
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::SweepGamma => cmd_sweep_gamma(cfg),
        Command::SmallSample => cmd_small_sample(cfg),
    }
}
