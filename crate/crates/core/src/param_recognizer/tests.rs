use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::train::{batch_loss, grad_blocks};
use super::*;
use crate::emotion_feature::AffectLabel;

fn tiny(seed: u64) -> Mlp {
    let cfg = MlpConfig { input_dim: 3, hidden: 4, n_classes: 3, leaky_slope: LEAKY_SLOPE };
    Mlp::new(cfg, seed).unwrap()
}

fn random_batch(seed: u64, n: usize, dim: usize, classes: usize) -> (Array2<f64>, Vec<AffectLabel>) {
    let mut rng = substream(seed, "mlp-test-batch");
    let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
    let labels = (0..n)
        .map(|_| AffectLabel {
            valence: rng.random_range(-1.0..1.0),
            arousal: rng.random_range(-1.0..1.0),
            class: rng.random_range(0..classes),
        })
        .collect();
    (x, labels)
}

#[test]
fn zero_network_predicts_zero() {
    let mlp = Mlp::zeroed(MlpConfig { hidden: 8, ..MlpConfig::new(5, 8) }).unwrap();
    let x = Array2::from_elem((3, 5), 0.7);
    for p in mlp.predict(x.view(), Mode::Eval).unwrap() {
        assert_eq!(p.valence, 0.0);
        assert_eq!(p.arousal, 0.0);
        assert!(p.logits.iter().all(|&l| l == 0.0));
    }
}

#[test]
fn leaky_slope_on_negative_input() {
    assert_eq!(leaky_relu(-1.0, LEAKY_SLOPE), -0.01);
    assert_eq!(leaky_relu(2.0, LEAKY_SLOPE), 2.0);
    // one unit wired straight through: identity dense layers, unit norm
    let cfg = MlpConfig { input_dim: 1, hidden: 1, n_classes: 1, leaky_slope: LEAKY_SLOPE };
    let mut mlp = Mlp::zeroed(cfg).unwrap();
    for l in 0..3 {
        mlp.weights[l][(0, 0)] = 1.0;
        mlp.norms[l].running_var[0] = 1.0 - BN_EPS;
    }
    mlp.weights[3][(0, 0)] = 1.0;
    let x = Array2::from_elem((1, 1), -1.0);
    let (out, cache) = mlp.forward(x.view(), Mode::Eval).unwrap();
    assert!((cache.normalized[0][(0, 0)] + 1.0).abs() < 1e-12);
    // three LeakyReLUs in series
    assert!((out[(0, 0)] + 1e-6).abs() < 1e-15);
}

#[test]
fn train_mode_normalizes_each_unit() {
    let mlp = Mlp::new(MlpConfig { hidden: 16, ..MlpConfig::new(6, 8) }, 3).unwrap();
    let (x, _) = random_batch(4, 64, 6, 8);
    let (_, cache) = mlp.forward(x.view(), Mode::Train).unwrap();
    for xhat in &cache.normalized {
        for col in xhat.columns() {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }
}

#[test]
fn shape_and_batch_errors() {
    let mlp = tiny(0);
    let x = Array2::zeros((1, 3));
    assert!(mlp.forward(x.view(), Mode::Train).is_err());
    assert!(mlp.forward(x.view(), Mode::Eval).is_ok());
    assert!(mlp.forward(Array2::zeros((2, 4)).view(), Mode::Eval).is_err());
    let mut bad = tiny(0);
    bad.norms[1].running_var[2] = 0.0;
    assert!(bad.validate().is_err());
}

fn perturbed_loss(mlp: &Mlp, x: &Array2<f64>, labels: &[AffectLabel], block: usize, i: usize, h: f64) -> f64 {
    let mut m = mlp.clone();
    let slot = match block {
        0..=3 => &mut m.weights[block].as_slice_mut().unwrap()[i],
        4..=7 => &mut m.biases[block - 4].as_slice_mut().unwrap()[i],
        8..=10 => &mut m.norms[block - 8].gamma.as_slice_mut().unwrap()[i],
        _ => &mut m.norms[block - 11].beta.as_slice_mut().unwrap()[i],
    };
    *slot += h;
    batch_loss(&m, x, labels, (0.3, 0.5, 0.9)).unwrap().0
}

#[test]
fn backprop_matches_finite_differences() {
    for seed in 0..3 {
        let mut mlp = tiny(seed);
        // nonunit affine so the norm gradients are exercised
        for n in &mut mlp.norms {
            n.gamma.mapv_inplace(|g| g * 1.3);
            n.beta.fill(0.1);
        }
        let (x, labels) = random_batch(seed + 10, 6, 3, 3);
        let (_, grads) = batch_loss(&mlp, &x, &labels, (0.3, 0.5, 0.9)).unwrap();
        let blocks = grad_blocks(&grads);
        assert_eq!(blocks.len(), 14);
        let h = 1e-6;
        for (b, g) in blocks.iter().enumerate() {
            for (i, &analytic) in g.iter().enumerate() {
                let fd = (perturbed_loss(&mlp, &x, &labels, b, i, h) - perturbed_loss(&mlp, &x, &labels, b, i, -h))
                    / (2.0 * h);
                let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
                assert!(err < 1e-4, "seed {seed} block {b} index {i}: fd {fd} analytic {analytic}");
            }
        }
    }
}

#[test]
fn eval_is_batch_size_independent() {
    let mut mlp = Mlp::new(MlpConfig { hidden: 32, ..MlpConfig::new(5, 8) }, 9).unwrap();
    let (x, _) = random_batch(2, 40, 5, 8);
    mlp.set_running_stats(x.view()).unwrap();
    let (full, _) = mlp.forward(x.view(), Mode::Eval).unwrap();
    for r in [0, 7, 39] {
        let single = x.slice(ndarray::s![r..r + 1, ..]);
        let (one, _) = mlp.forward(single, Mode::Eval).unwrap();
        for c in 0..full.ncols() {
            assert!((one[(0, c)] - full[(r, c)]).abs() < 1e-10);
        }
    }
}

/// Three Gaussian clusters, centers far apart relative to the noise.
pub(crate) fn cluster_dataset(seed: u64, per_class: usize, dim: usize) -> Vec<TrainSample> {
    let mut rng = substream(seed, "clusters");
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut out = Vec::new();
    for class in 0..3 {
        let center: Vec<f64> = (0..dim).map(|d| if d % 3 == class { 2.0 } else { -1.0 }).collect();
        let (v, a) = [(0.6, 0.2), (-0.5, 0.5), (0.0, -0.6)][class];
        for _ in 0..per_class {
            out.push(TrainSample {
                input: center.iter().map(|c| c + noise.sample(&mut rng)).collect(),
                label: AffectLabel { valence: v, arousal: a, class },
            });
        }
    }
    out
}

#[test]
fn separable_clusters_are_learned() {
    let data = cluster_dataset(5, 60, 6);
    let mlp = Mlp::new(MlpConfig { hidden: 32, ..MlpConfig::new(6, 3) }, 1).unwrap();
    let cfg = TrainConfig { epochs: 200, seed: 2, ..Default::default() };
    let out = train_mlp(mlp, &data, &cfg).unwrap();
    let acc = out.trace[out.best_epoch].val_accuracy;
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn zero_lr_keeps_validation_loss_constant() {
    let data = cluster_dataset(6, 20, 4);
    let mlp = Mlp::new(MlpConfig { hidden: 8, ..MlpConfig::new(4, 3) }, 1).unwrap();
    let mut cfg = TrainConfig { epochs: 5, seed: 3, ..Default::default() };
    cfg.adam.lr = 0.0;
    let out = train_mlp(mlp, &data, &cfg).unwrap();
    let first = out.trace[0].val_loss;
    assert!(out.trace.iter().all(|e| e.val_loss == first));
    assert_eq!(out.best.weights, out.last.weights);
}

#[test]
fn training_is_reproducible() {
    let data = cluster_dataset(7, 15, 4);
    let cfg = TrainConfig { epochs: 4, seed: 11, ..Default::default() };
    let make = || Mlp::new(MlpConfig { hidden: 8, ..MlpConfig::new(4, 3) }, 4).unwrap();
    let a = train_mlp(make(), &data, &cfg).unwrap();
    let b = train_mlp(make(), &data, &cfg).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.last, b.last);
}

#[test]
fn divergence_is_reported() {
    let mut data = cluster_dataset(8, 10, 4);
    data[0].label.valence = 1e300;
    let mlp = Mlp::new(MlpConfig { hidden: 8, ..MlpConfig::new(4, 3) }, 1).unwrap();
    let cfg = TrainConfig { epochs: 2, seed: 1, ..Default::default() };
    assert!(matches!(train_mlp(mlp, &data, &cfg), Err(Error::Divergence(_))));
}

#[test]
fn checkpoint_round_trip() {
    let mlp = tiny(21);
    let mut buf = Vec::new();
    write_mlp(&mlp, &mut buf).unwrap();
    assert_eq!(&buf[..4], MLP_MAGIC);
    let back = read_mlp(&mut buf.as_slice()).unwrap();
    assert_eq!(back, mlp);
    buf[0] = b'X';
    assert!(read_mlp(&mut buf.as_slice()).is_err());
}
