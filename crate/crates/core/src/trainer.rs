//! Layer-by-layer analytic training.
//!
//! Each conv layer makes one accumulation pass over its inputs (im2col rows
//! against the label-encoded targets), solves, and hands its activations to
//! the next layer. The final dense layer regresses onto the one-hot labels.

use std::fmt;
use std::ops::Range;
use std::sync::mpsc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use rayon::prelude::*;

use crate::data::{subsample_per_class, Dataset};
use crate::encoding::{derive_layer_seed, make_scaled_encoder, PRNG_ID};
use crate::error::{shape_err, validation_err, AcnnlError, Result};
use crate::network::{
    argmax, build_linear, chunk_len, conv_block, dense_features, stacked_patches, LayerPlan,
    LayerSpec, ModelMetadata, NetworkSpec, TrainedNetwork,
};
use crate::ridge::{GramAccumulator, SolveMethod, SolveReport};
use crate::tensor::{Mat, Tensor3};

/// Where a layer's inputs come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LayerCache {
    /// Rerun the trained prefix on the raw samples for every layer.
    #[default]
    Recompute,
    /// Keep each layer's activations in memory for the next.
    Memory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub encoder_seed: u64,
    pub encoder_scale: f64,
    pub bias: bool,
    /// Fixed shard merge order and a zero timestamp in the model metadata.
    pub deterministic: bool,
    pub workers: usize,
    pub layer_cache: LayerCache,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: crate::network::DEFAULT_GAMMA,
            encoder_seed: 0,
            encoder_scale: 1.0,
            bias: false,
            deterministic: true,
            workers: 1,
            layer_cache: LayerCache::Recompute,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return validation_err(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if self.workers == 0 {
            return validation_err("workers must be at least 1");
        }
        if self.encoder_scale <= 0.0 || !self.encoder_scale.is_finite() {
            return validation_err(format!(
                "encoder_scale must be positive, got {}",
                self.encoder_scale
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerReport {
    pub index: usize,
    pub kind: &'static str,
    pub gram_dim: usize,
    pub rows_seen: usize,
    pub samples_seen: usize,
    pub accumulate_seconds: f64,
    /// Solver path and timing for this layer.
    pub solve: SolveReport,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingReport {
    pub layers: Vec<LayerReport>,
    /// Full passes over the layer inputs, summed over layers.
    pub dataset_passes: usize,
    pub wall_seconds: f64,
}

impl TrainingReport {
    pub fn solve_seconds(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.solve.seconds).collect()
    }
}

impl fmt::Display for TrainingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            let method = match l.solve.method {
                SolveMethod::Cholesky => "cholesky",
                SolveMethod::Pseudoinverse => "pinv",
            };
            write!(
                f,
                "layer {} {}: gram_dim={} rows_seen={} samples={} accumulate_s={:.3} solve_s={:.3} method={}",
                l.index,
                l.kind,
                l.gram_dim,
                l.rows_seen,
                l.samples_seen,
                l.accumulate_seconds,
                l.solve.seconds,
                method
            )?;
            if let Some(c) = l.solve.condition_estimate() {
                write!(f, " cond>={c:.3e}")?;
            }
            writeln!(f)?;
        }
        write!(
            f,
            "passes={} wall_s={:.3}",
            self.dataset_passes, self.wall_seconds
        )
    }
}

/// Layer inputs for one accumulation or activation pass.
enum Source<'a> {
    /// Raw samples pushed through a trained prefix of conv blocks.
    Raw {
        images: &'a [Tensor3],
        prefix: Vec<(LayerPlan, &'a Mat)>,
    },
    Cached(&'a [Tensor3]),
}

impl Source<'_> {
    fn len(&self) -> usize {
        match self {
            Source::Raw { images, .. } => images.len(),
            Source::Cached(v) => v.len(),
        }
    }

    /// Hands `f` the layer inputs for samples in `range`.
    fn with_chunk<T>(
        &self,
        range: Range<usize>,
        f: impl FnOnce(&[&Tensor3]) -> Result<T>,
    ) -> Result<T> {
        match self {
            Source::Cached(v) => f(&v[range].iter().collect::<Vec<_>>()),
            Source::Raw { images, prefix } => {
                let raw: Vec<&Tensor3> = images[range].iter().collect();
                let mut owned: Option<Vec<Tensor3>> = None;
                for (plan, w) in prefix {
                    let next = match &owned {
                        Some(v) => conv_block(plan, w, &v.iter().collect::<Vec<_>>())?,
                        None => conv_block(plan, w, &raw)?,
                    };
                    owned = Some(next);
                }
                match &owned {
                    Some(v) => f(&v.iter().collect::<Vec<_>>()),
                    None => f(&raw),
                }
            }
        }
    }
}

/// Per-sample regression targets, indexed by class: `positions×J` blocks for
/// a conv layer, one-hot rows for the dense layer.
struct Targets {
    by_class: Vec<Vec<f64>>,
}

impl Targets {
    fn conv(classes: usize, j: usize, positions: usize, seed: u64, scale: f64) -> Result<Self> {
        let enc = make_scaled_encoder(classes, j, positions, seed, scale)?;
        let by_class = (0..classes)
            .map(|c| enc.class_target(c).map(Mat::into_vec))
            .collect::<Result<_>>()?;
        Ok(Self { by_class })
    }

    fn onehot(classes: usize) -> Self {
        let by_class = (0..classes)
            .map(|c| {
                let mut row = vec![0.0; classes];
                row[c] = 1.0;
                row
            })
            .collect();
        Self { by_class }
    }
}

fn shard_ranges(n: usize, workers: usize) -> Vec<Range<usize>> {
    let workers = workers.clamp(1, n.max(1));
    (0..workers)
        .map(|w| (w * n / workers)..((w + 1) * n / workers))
        .collect()
}

fn accumulate_shard(
    source: &Source<'_>,
    labels: &[usize],
    plan: &LayerPlan,
    targets: &Targets,
    bias: bool,
    range: Range<usize>,
) -> Result<GramAccumulator> {
    let (dim_in, dim_out) = plan.weight_shape(bias);
    let mut acc = GramAccumulator::new(dim_in, dim_out);
    let rps = plan.rows_per_sample();
    let step = chunk_len(rps);
    let mut start = range.start;
    while start < range.end {
        let end = (start + step).min(range.end);
        source.with_chunk(start..end, |inputs| {
            let rows = inputs.len() * rps;
            let x = match plan {
                LayerPlan::Conv { geom, .. } => stacked_patches(inputs, geom, dim_in),
                LayerPlan::Dense { in_dim, .. } => {
                    let mut buf = vec![0.0; inputs.len() * dim_in];
                    for (t, dst) in inputs.iter().zip(buf.chunks_mut(dim_in)) {
                        if t.len() != *in_dim {
                            return shape_err(format!(
                                "dense input has {} features, expected {in_dim}",
                                t.len()
                            ));
                        }
                        dense_features(t, bias, dst);
                    }
                    buf
                }
            };
            let mut z = Vec::with_capacity(rows * dim_out);
            for &l in &labels[start..end] {
                z.extend_from_slice(&targets.by_class[l]);
            }
            acc.accumulate_rows(&x, &z, rows, inputs.len());
            Ok(())
        })?;
        start = end;
    }
    Ok(acc)
}

/// One accumulation pass, sharded over `cfg.workers` threads.
fn accumulate(
    source: &Source<'_>,
    labels: &[usize],
    plan: &LayerPlan,
    targets: &Targets,
    cfg: &TrainConfig,
) -> Result<GramAccumulator> {
    let shards = shard_ranges(source.len(), cfg.workers);
    if shards.len() == 1 {
        return accumulate_shard(source, labels, plan, targets, cfg.bias, shards[0].clone());
    }
    let (dim_in, dim_out) = plan.weight_shape(cfg.bias);
    let mut total = GramAccumulator::new(dim_in, dim_out);
    std::thread::scope(|s| -> Result<()> {
        let (tx, rx) = mpsc::channel();
        for (i, r) in shards.iter().cloned().enumerate() {
            let tx = tx.clone();
            s.spawn(move || {
                let out = accumulate_shard(source, labels, plan, targets, cfg.bias, r);
                let _ = tx.send((i, out));
            });
        }
        drop(tx);
        if cfg.deterministic {
            let mut parts: Vec<Option<GramAccumulator>> = vec![None; shards.len()];
            for (i, out) in rx {
                parts[i] = Some(out?);
            }
            for p in parts.into_iter().flatten() {
                total.merge_from(&p)?;
            }
        } else {
            for (_, out) in rx {
                total.merge_from(&out?)?;
            }
        }
        Ok(())
    })?;
    Ok(total)
}

/// Activation pass: runs a trained conv block over every input.
fn activate(
    source: &Source<'_>,
    plan: &LayerPlan,
    w: &Mat,
    workers: usize,
) -> Result<Vec<Tensor3>> {
    let step = chunk_len(plan.rows_per_sample());
    let starts: Vec<usize> = (0..source.len()).step_by(step).collect();
    let run = |&s: &usize| {
        let e = (s + step).min(source.len());
        source.with_chunk(s..e, |inputs| conv_block(plan, w, inputs))
    };
    let parts: Vec<Vec<Tensor3>> = if workers > 1 {
        starts.par_iter().map(run).collect::<Result<_>>()?
    } else {
        starts.iter().map(run).collect::<Result<_>>()?
    };
    Ok(parts.into_iter().flatten().collect())
}

fn solve(
    acc: &GramAccumulator,
    index: usize,
    plan: &LayerPlan,
    gamma: f64,
    accumulate_seconds: f64,
) -> Result<(Mat, LayerReport)> {
    let (w, solve) = acc.solve_with_report(gamma)?;
    info!(
        "layer {index}: gram {} rows {} solved in {:.3}s",
        acc.dim_in(),
        acc.rows_seen(),
        solve.seconds
    );
    Ok((
        w,
        LayerReport {
            index,
            kind: match plan {
                LayerPlan::Conv { .. } => "conv",
                LayerPlan::Dense { .. } => "dense",
            },
            gram_dim: acc.dim_in(),
            rows_seen: acc.rows_seen(),
            samples_seen: acc.samples_seen(),
            accumulate_seconds,
            solve,
        },
    ))
}

fn targets_for(
    plan: &LayerPlan,
    index: usize,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<Targets> {
    match *plan {
        LayerPlan::Conv {
            geom, out_channels, ..
        } => Targets::conv(
            classes,
            out_channels,
            geom.positions(),
            derive_layer_seed(cfg.encoder_seed, index),
            cfg.encoder_scale,
        ),
        LayerPlan::Dense { .. } => Ok(Targets::onehot(classes)),
    }
}

fn check_dataset(d: &Dataset, spec: &NetworkSpec) -> Result<()> {
    if d.is_empty() {
        return validation_err("training set is empty");
    }
    if d.dims() != Some(spec.input) {
        return shape_err(format!(
            "dataset dims {:?} do not match network input {:?}",
            d.dims(),
            spec.input
        ));
    }
    if d.classes() != spec.classes {
        return validation_err(format!(
            "dataset has {} classes, network expects {}",
            d.classes(),
            spec.classes
        ));
    }
    Ok(())
}

/// Trains all layers in order, optionally starting from an already
/// accumulated first layer (the γ sweep shares it).
fn train_from(
    d: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    first: Option<(&GramAccumulator, f64)>,
) -> Result<(TrainedNetwork, TrainingReport)> {
    let start = Instant::now();
    cfg.validate()?;
    let mut spec = spec.clone();
    spec.gamma = cfg.gamma;
    spec.encoder_seed = cfg.encoder_seed;
    spec.encoder_scale = cfg.encoder_scale;
    spec.bias = cfg.bias;
    let plans = spec.plan()?;
    check_dataset(d, &spec)?;

    let mut weights: Vec<Mat> = Vec::with_capacity(plans.len());
    let mut report = TrainingReport::default();
    let mut cache: Option<Vec<Tensor3>> = None;
    for (index, plan) in plans.iter().enumerate() {
        let source = match (&cache, cfg.layer_cache) {
            (Some(v), LayerCache::Memory) => Source::Cached(v),
            _ => Source::Raw {
                images: d.images(),
                prefix: plans[..index].iter().copied().zip(weights.iter()).collect(),
            },
        };
        let t = Instant::now();
        let fresh;
        let (acc, acc_s) = match first {
            Some((a, s)) if index == 0 => (a, s),
            _ => {
                let targets = targets_for(plan, index, spec.classes, cfg)?;
                fresh = accumulate(&source, d.labels(), plan, &targets, cfg)?;
                report.dataset_passes += 1;
                (&fresh, t.elapsed().as_secs_f64())
            }
        };
        let (w, layer) = solve(acc, index, plan, cfg.gamma, acc_s)?;
        report.layers.push(layer);
        if cfg.layer_cache == LayerCache::Memory && index + 1 < plans.len() {
            let next = activate(&source, plan, &w, cfg.workers)?;
            report.dataset_passes += 1;
            drop(source);
            cache = Some(next);
        }
        weights.push(w);
    }
    let trained_at = if cfg.deterministic {
        0
    } else {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |t| t.as_secs())
    };
    let meta = ModelMetadata {
        prng_id: PRNG_ID.to_string(),
        training_fingerprint: d.fingerprint(),
        trained_at,
    };
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((TrainedNetwork::new(spec, weights, meta)?, report))
}

pub fn train_acnnl(d: &Dataset, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<TrainedNetwork> {
    train_with_report(d, spec, cfg).map(|(n, _)| n)
}

pub fn train_with_report(
    d: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(TrainedNetwork, TrainingReport)> {
    train_from(d, spec, cfg, None)
}

/// One network per γ. The first layer sees raw inputs, so its sums are
/// accumulated once and re-solved per γ; deeper layers depend on the γ used
/// upstream and are retrained.
pub fn train_gamma_sweep(
    d: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    gammas: &[f64],
) -> Result<Vec<(TrainedNetwork, TrainingReport)>> {
    cfg.validate()?;
    for &g in gammas {
        TrainConfig {
            gamma: g,
            ..cfg.clone()
        }
        .validate()?;
    }
    let mut spec = spec.clone();
    spec.bias = cfg.bias;
    let plans = spec.plan()?;
    check_dataset(d, &spec)?;
    let t = Instant::now();
    let source = Source::Raw {
        images: d.images(),
        prefix: Vec::new(),
    };
    let targets = targets_for(&plans[0], 0, spec.classes, cfg)?;
    let first = accumulate(&source, d.labels(), &plans[0], &targets, cfg)?;
    let first_s = t.elapsed().as_secs_f64();
    gammas
        .iter()
        .enumerate()
        .map(|(i, &gamma)| {
            let c = TrainConfig {
                gamma,
                ..cfg.clone()
            };
            // the shared pass is charged to the first network only
            let (net, mut rep) = train_from(d, &spec, &c, Some((&first, first_s)))?;
            if i == 0 {
                rep.dataset_passes += 1;
                rep.wall_seconds += first_s;
            }
            Ok((net, rep))
        })
        .collect()
}

/// A single ridge classifier on flattened raw pixels.
pub fn train_mlp_baseline(d: &Dataset, gamma: f64) -> Result<TrainedNetwork> {
    let dims = d
        .dims()
        .ok_or_else(|| AcnnlError::Validation("training set is empty".into()))?;
    let spec = build_linear(dims, d.classes())?;
    train_acnnl(
        d,
        &spec,
        &TrainConfig {
            gamma,
            ..TrainConfig::default()
        },
    )
}

fn onehot_labels(y: &Mat) -> Result<Vec<usize>> {
    (0..y.rows())
        .map(|n| {
            let row = y.row(n);
            let hot: Vec<usize> = (0..row.len()).filter(|&i| row[i] != 0.0).collect();
            match hot[..] {
                [c] if row[c] == 1.0 => Ok(c),
                _ => validation_err(format!("label row {n} is not one-hot")),
            }
        })
        .collect()
}

pub struct ConvLayerOutput {
    pub weights: Mat,
    pub activations: Vec<Tensor3>,
    pub report: LayerReport,
}

/// Trains one conv layer in isolation: encodes the labels for the layer's
/// output size, accumulates, solves, and returns the activations that feed
/// the next layer. `index` selects the per-layer encoder seed.
pub fn train_layer_conv(
    samples: &[Tensor3],
    y: &Mat,
    layer: &LayerSpec,
    index: usize,
    cfg: &TrainConfig,
) -> Result<ConvLayerOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return validation_err("no samples");
    }
    if y.rows() != samples.len() {
        return shape_err(format!(
            "{} samples but {} label rows",
            samples.len(),
            y.rows()
        ));
    }
    let labels = onehot_labels(y)?;
    let spec = NetworkSpec {
        input: samples[0].dims(),
        classes: y.cols(),
        layers: vec![layer.clone(), LayerSpec::Dense { out_dim: y.cols() }],
        gamma: cfg.gamma,
        encoder_seed: cfg.encoder_seed,
        encoder_scale: cfg.encoder_scale,
        bias: cfg.bias,
    };
    let plan = match spec.plan()?[0] {
        p @ LayerPlan::Conv { .. } => p,
        LayerPlan::Dense { .. } => return validation_err("train_layer_conv needs a conv layer"),
    };
    let source = Source::Cached(samples);
    let t = Instant::now();
    let targets = targets_for(&plan, index, spec.classes, cfg)?;
    let acc = accumulate(&source, &labels, &plan, &targets, cfg)?;
    let (weights, report) = solve(&acc, index, &plan, cfg.gamma, t.elapsed().as_secs_f64())?;
    let activations = activate(&source, &plan, &weights, cfg.workers)?;
    Ok(ConvLayerOutput {
        weights,
        activations,
        report,
    })
}

/// Ridge map from flattened features onto the one-hot labels.
pub fn train_final_mlp(features: &[Tensor3], y: &Mat, gamma: f64, bias: bool) -> Result<Mat> {
    if features.is_empty() {
        return validation_err("no samples");
    }
    if y.rows() != features.len() {
        return shape_err(format!(
            "{} samples but {} label rows",
            features.len(),
            y.rows()
        ));
    }
    let labels = onehot_labels(y)?;
    let plan = LayerPlan::Dense {
        in_dim: features[0].len(),
        out_dim: y.cols(),
    };
    let cfg = TrainConfig {
        gamma,
        bias,
        ..TrainConfig::default()
    };
    let acc = accumulate(
        &Source::Cached(features),
        &labels,
        &plan,
        &Targets::onehot(y.cols()),
        &cfg,
    )?;
    acc.solve_layer(gamma)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Recall per class; NaN for classes absent from the data.
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn predict_all(net: &TrainedNetwork, d: &Dataset) -> Result<Vec<usize>> {
    let step = chunk_len(net.plans()[0].rows_per_sample());
    let parts: Vec<Vec<usize>> = d
        .images()
        .par_chunks(step)
        .map(|c| Ok(net.forward_batch(c)?.iter().map(|l| argmax(l)).collect()))
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

pub fn evaluate(net: &TrainedNetwork, d: &Dataset) -> Result<Evaluation> {
    if d.classes() != net.spec().classes {
        return validation_err(format!(
            "dataset has {} classes, network predicts {}",
            d.classes(),
            net.spec().classes
        ));
    }
    let preds = predict_all(net, d)?;
    let k = d.classes();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in d.labels().iter().zip(&preds) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                f64::NAN
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    Ok(Evaluation {
        accuracy: if d.is_empty() {
            0.0
        } else {
            correct as f64 / d.len() as f64
        },
        per_class,
        confusion,
    })
}

/// Trains from scratch on `n_c` samples per class and scores on `test`.
pub fn small_sample_protocol(
    train: &Dataset,
    test: &Dataset,
    n_c: usize,
    seed: u64,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<f64> {
    let subset = subsample_per_class(train, n_c, seed)?;
    let net = train_acnnl(&subset, spec, cfg)?;
    Ok(evaluate(&net, test)?.accuracy)
}
