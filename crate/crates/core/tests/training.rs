mod common;

use acnnl::data::{synthetic_blobs, to_onehot, Dataset};
use acnnl::encoding::{derive_layer_seed, make_encoder};
use acnnl::im2col::im2col;
use acnnl::network::{build_cnn, LayerPlan, LayerSpec, ModelMetadata};
use acnnl::ridge::layer_objective;
use acnnl::trainer::{
    evaluate, small_sample_protocol, train_acnnl, train_final_mlp, train_gamma_sweep,
    train_layer_conv, train_mlp_baseline, train_with_report, LayerCache, TrainConfig,
};
use acnnl::{Mat, Tensor3, TrainedNetwork};
use common::*;

fn conv(kernel: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::Conv {
        kernel,
        out_channels,
        slope: 0.1,
        pool: None,
    }
}

fn cfg(gamma: f64) -> TrainConfig {
    TrainConfig {
        gamma,
        encoder_seed: 3,
        ..TrainConfig::default()
    }
}

/// Stacked im2col design and encoded targets for a conv layer.
fn stacked_layer(xs: &[Tensor3], labels: &[usize], k: usize, j: usize, seed: u64) -> (Mat, Mat) {
    let positions = (xs[0].width() - k + 1) * (xs[0].height() - k + 1);
    let enc = make_encoder(3, j, positions, derive_layer_seed(seed, 0)).unwrap();
    let x: Vec<Mat> = xs.iter().map(|x| im2col(x, k).unwrap()).collect();
    let z: Vec<Mat> = labels
        .iter()
        .map(|&l| enc.class_target(l).unwrap())
        .collect();
    (Mat::vstack(&x).unwrap(), Mat::vstack(&z).unwrap())
}

#[test]
fn single_sample_wide_layer_fits_exactly() {
    // C·K² = 2·16 = 32 against 4 positions
    let mut r = rng(1);
    let x = random_tensor(&mut r, 2, 5, 5);
    let y = to_onehot(&[1], 3).unwrap();
    let out = train_layer_conv(std::slice::from_ref(&x), &y, &conv(4, 3), 0, &cfg(0.0)).unwrap();
    let (xs, zs) = stacked_layer(&[x], &[1], 4, 3, 3);
    let residual = naive_mul(&xs, &out.weights)
        .sub(&zs)
        .unwrap()
        .frobenius_norm();
    assert!(residual <= 1e-8, "residual {residual}");
}

#[test]
fn conv_layer_matches_stacked_oracle() {
    let mut r = rng(2);
    let xs: Vec<Tensor3> = (0..20).map(|_| random_tensor(&mut r, 2, 6, 5)).collect();
    let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
    let y = to_onehot(&labels, 3).unwrap();
    let out = train_layer_conv(&xs, &y, &conv(3, 4), 0, &cfg(0.5)).unwrap();
    let (sx, sz) = stacked_layer(&xs, &labels, 3, 4, 3);
    let oracle = oracle_ridge(&sx, &sz, 0.5);
    assert!(rel_diff(&out.weights, &oracle) <= 1e-9);
    assert_eq!(out.report.rows_seen, 20 * 12);
    assert_eq!(out.activations.len(), 20);
    assert_eq!(out.activations[0].dims(), (4, 4, 3));
}

#[test]
fn duplicated_samples_leave_weights_unchanged() {
    let mut r = rng(3);
    let xs: Vec<Tensor3> = (0..15).map(|_| random_tensor(&mut r, 1, 6, 6)).collect();
    let labels: Vec<usize> = (0..15).map(|i| i % 3).collect();
    let twice: Vec<Tensor3> = xs.iter().chain(&xs).cloned().collect();
    let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
    let a = train_layer_conv(
        &xs,
        &to_onehot(&labels, 3).unwrap(),
        &conv(3, 2),
        0,
        &cfg(0.0),
    )
    .unwrap();
    let b = train_layer_conv(
        &twice,
        &to_onehot(&labels2, 3).unwrap(),
        &conv(3, 2),
        0,
        &cfg(0.0),
    )
    .unwrap();
    assert!(rel_diff(&a.weights, &b.weights) <= 1e-10);
}

#[test]
fn trained_conv_layer_is_locally_optimal() {
    let mut r = rng(4);
    let xs: Vec<Tensor3> = (0..12).map(|_| random_tensor(&mut r, 2, 5, 5)).collect();
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let gamma = 2.0;
    let out = train_layer_conv(
        &xs,
        &to_onehot(&labels, 3).unwrap(),
        &conv(3, 3),
        0,
        &cfg(gamma),
    )
    .unwrap();
    let positions = 9;
    let enc = make_encoder(3, 3, positions, derive_layer_seed(3, 0)).unwrap();
    let pairs: Vec<(Mat, Mat)> = xs
        .iter()
        .zip(&labels)
        .map(|(x, &l)| (im2col(x, 3).unwrap(), enc.class_target(l).unwrap()))
        .collect();
    let best = layer_objective(&pairs, &out.weights, gamma).unwrap();
    let wn = out.weights.frobenius_norm();
    for _ in 0..100 {
        let d = random_mat(&mut r, 18, 3);
        let w = out
            .weights
            .add(&d.scaled(1e-3 * wn / d.frobenius_norm()))
            .unwrap();
        assert!(layer_objective(&pairs, &w, gamma).unwrap() >= best);
    }
}

#[test]
fn final_mlp_on_identity_features() {
    let feats: Vec<Tensor3> = (0..4)
        .map(|c| {
            let mut t = Tensor3::zeros(4, 1, 1);
            t.set(c, 0, 0, 1.0);
            t
        })
        .collect();
    let y = to_onehot(&[0, 1, 2, 3], 4).unwrap();
    let w = train_final_mlp(&feats, &y, 0.0, false).unwrap();
    assert!(w.max_abs_diff(&Mat::identity(4)) <= 1e-12);
}

#[test]
fn final_mlp_matches_stacked_oracle() {
    let mut r = rng(5);
    let feats: Vec<Tensor3> = (0..30).map(|_| random_tensor(&mut r, 3, 2, 2)).collect();
    let labels: Vec<usize> = (0..30).map(|i| (i * 7) % 4).collect();
    let y = to_onehot(&labels, 4).unwrap();
    let w = train_final_mlp(&feats, &y, 0.3, false).unwrap();
    let x = Mat::from_fn(30, 12, |n, i| feats[n].as_slice()[i]);
    assert!(rel_diff(&w, &oracle_ridge(&x, &y, 0.3)) <= 1e-9);

    let wb = train_final_mlp(&feats, &y, 0.3, true).unwrap();
    let xb = Mat::from_fn(
        30,
        13,
        |n, i| if i == 12 { 1.0 } else { feats[n].as_slice()[i] },
    );
    assert!(rel_diff(&wb, &oracle_ridge(&xb, &y, 0.3)) <= 1e-9);
}

fn blobs() -> Dataset {
    synthetic_blobs(3, 20, (1, 12, 12), 1.5, 21).unwrap()
}

#[test]
fn gamma_sweep_equals_separate_runs() {
    let d = blobs();
    let spec = build_cnn(3, 2, (1, 12, 12), 3).unwrap();
    let gammas = [0.1, 10.0];
    let sweep = train_gamma_sweep(&d, &spec, &cfg(1.0), &gammas).unwrap();
    for ((net, rep), &g) in sweep.iter().zip(&gammas) {
        let (alone, arep) = train_with_report(&d, &spec, &cfg(g)).unwrap();
        assert_eq!(net.weights(), alone.weights());
        assert_eq!(net.spec().gamma, g);
        assert_eq!(rep.layers[0].gram_dim, arep.layers[0].gram_dim);
    }
    assert_ne!(sweep[0].0.weights()[0], sweep[1].0.weights()[0]);
}

#[test]
fn blobs_reach_high_training_accuracy() {
    let d = synthetic_blobs(2, 100, (1, 12, 12), 3.0, 5).unwrap();
    let spec = build_cnn(3, 2, (1, 12, 12), 2).unwrap();
    let net = train_acnnl(&d, &spec, &cfg(1.0)).unwrap();
    assert!(evaluate(&net, &d).unwrap().accuracy >= 0.95);
}

#[test]
fn baseline_fits_identity_data() {
    let images: Vec<Tensor3> = (0..4)
        .map(|c| {
            let mut t = Tensor3::zeros(1, 2, 2);
            t.as_mut_slice()[c] = 1.0;
            t
        })
        .collect();
    let d = Dataset::new(images, vec![0, 1, 2, 3], 4, "identity").unwrap();
    let net = train_mlp_baseline(&d, 1e-6).unwrap();
    let e = evaluate(&net, &d).unwrap();
    assert_eq!(e.accuracy, 1.0);
}

#[test]
fn heavy_shrinkage_falls_back_to_majority_class() {
    let all = synthetic_blobs(2, 180, (1, 4, 4), 0.3, 9).unwrap();
    // keep all of class 0 and 20 of class 1
    let mut keep: Vec<usize> = (0..all.len()).filter(|&i| all.labels()[i] == 0).collect();
    keep.extend((0..all.len()).filter(|&i| all.labels()[i] == 1).take(20));
    keep.sort_unstable();
    let d = all.select(&keep).unwrap();
    let majority = 180.0 / 200.0;
    let net = train_mlp_baseline(&d, 1e9).unwrap();
    let e = evaluate(&net, &d).unwrap();
    assert_eq!(e.accuracy, majority);
    assert_eq!(e.confusion[1][1], 0);
    let sharp = evaluate(&train_mlp_baseline(&d, 1e-3).unwrap(), &d).unwrap();
    assert!(sharp.accuracy > majority);
}

#[test]
fn zero_network_scores_class_zero_rate() {
    let d = synthetic_blobs(10, 7, (1, 8, 8), 1.0, 2).unwrap();
    let spec = build_cnn(2, 2, (1, 8, 8), 10).unwrap();
    let weights = spec
        .plan()
        .unwrap()
        .iter()
        .map(|p| {
            let (r, c) = p.weight_shape(false);
            Mat::zeros(r, c)
        })
        .collect();
    let meta = ModelMetadata {
        prng_id: String::new(),
        training_fingerprint: 0,
        trained_at: 0,
    };
    let net = TrainedNetwork::new(spec, weights, meta).unwrap();
    let e = evaluate(&net, &d).unwrap();
    assert!((e.accuracy - 0.1).abs() < 1e-12);
    for (row, &n) in e.confusion.iter().zip(&d.class_counts()) {
        assert_eq!(row.iter().sum::<usize>(), n);
        assert_eq!(row[0], n);
    }
}

#[test]
fn confusion_rows_sum_to_class_counts() {
    let d = blobs();
    let spec = build_cnn(2, 2, (1, 12, 12), 3).unwrap();
    let net = train_acnnl(&d, &spec, &cfg(1.0)).unwrap();
    let e = evaluate(&net, &d).unwrap();
    let counts = d.class_counts();
    for (c, row) in e.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), counts[c]);
    }
    let diag: usize = (0..3).map(|c| e.confusion[c][c]).sum();
    assert_eq!(e.accuracy, diag as f64 / d.len() as f64);
}

#[test]
fn small_sample_protocol_behaviour() {
    let train = blobs();
    let test = synthetic_blobs(3, 10, (1, 12, 12), 1.5, 21).unwrap();
    let spec = build_cnn(2, 2, (1, 12, 12), 3).unwrap();
    let full = small_sample_protocol(&train, &test, 20, 1, &spec, &cfg(1.0)).unwrap();
    let direct = evaluate(&train_acnnl(&train, &spec, &cfg(1.0)).unwrap(), &test).unwrap();
    assert_eq!(full, direct.accuracy);
    let a = small_sample_protocol(&train, &test, 5, 8, &spec, &cfg(1.0)).unwrap();
    let b = small_sample_protocol(&train, &test, 5, 8, &spec, &cfg(1.0)).unwrap();
    assert_eq!(a, b);
    assert!(small_sample_protocol(&train, &test, 21, 1, &spec, &cfg(1.0)).is_err());
}

#[test]
fn pass_count_and_constraint_accounting() {
    let d = synthetic_blobs(3, 10, (1, 20, 20), 1.0, 4).unwrap();
    let spec = build_cnn(4, 2, (1, 20, 20), 3).unwrap();
    let plans = spec.plan().unwrap();
    let layers = plans.len();
    for cache in [LayerCache::Recompute, LayerCache::Memory] {
        let c = TrainConfig {
            layer_cache: cache,
            ..cfg(1.0)
        };
        let (_, rep) = train_with_report(&d, &spec, &c).unwrap();
        assert!(rep.dataset_passes <= 2 * (layers - 1) + 1);
        for (plan, l) in plans.iter().zip(&rep.layers) {
            assert!(plan.rows_per_sample() >= 1);
            assert_eq!(l.rows_seen, d.len() * plan.rows_per_sample());
            assert_eq!(l.samples_seen, d.len());
            if let LayerPlan::Conv { geom, .. } = plan {
                assert_eq!(l.rows_seen / l.samples_seen, geom.positions());
            }
        }
    }
}

#[test]
fn worker_sharding() {
    let d = synthetic_blobs(3, 15, (1, 12, 12), 1.0, 6).unwrap();
    let spec = build_cnn(3, 2, (1, 12, 12), 3).unwrap();
    let one = train_acnnl(&d, &spec, &cfg(1.0)).unwrap();
    let multi = TrainConfig {
        workers: 3,
        deterministic: true,
        ..cfg(1.0)
    };
    let a = train_acnnl(&d, &spec, &multi).unwrap();
    let b = train_acnnl(&d, &spec, &multi).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.weights().iter().zip(one.weights()) {
        assert!(rel_diff(x, y) <= 1e-9);
    }
}

#[test]
fn mismatched_dataset_rejected() {
    let d = blobs();
    let spec = build_cnn(2, 2, (1, 10, 10), 3).unwrap();
    assert!(train_acnnl(&d, &spec, &cfg(1.0)).is_err());
    let spec = build_cnn(2, 2, (1, 12, 12), 4).unwrap();
    assert!(train_acnnl(&d, &spec, &cfg(1.0)).is_err());
    let empty = Dataset::new(vec![], vec![], 3, "").unwrap();
    let spec = build_cnn(2, 2, (1, 12, 12), 3).unwrap();
    assert!(train_acnnl(&empty, &spec, &cfg(1.0)).is_err());
}
