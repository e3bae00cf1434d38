use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{outputs_to_predictions, Mlp, MlpGrads, Mode};
use crate::emotion_feature::{recognition_loss, AffectLabel};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: Vec<f64>,
    pub label: AffectLabel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of samples held out for validation and best-model selection.
    pub val_fraction: f64,
    /// Draw the regression mixing weights uniformly per batch; otherwise all are 1.
    pub shake_shake: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
            val_fraction: 0.2,
            shake_shake: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation loss.
    pub best: Mlp,
    pub best_epoch: usize,
    pub last: Mlp,
    pub trace: Vec<EpochStats>,
}

fn stack(samples: &[TrainSample], idx: &[usize], dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), dim), |(r, c)| samples[idx[r]].input[c])
}

pub(crate) fn param_blocks(mlp: &mut Mlp) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for w in &mut mlp.weights {
        out.push(w.as_slice_mut().expect("standard layout"));
    }
    for b in &mut mlp.biases {
        out.push(b.as_slice_mut().expect("standard layout"));
    }
    let (gammas, betas): (Vec<_>, Vec<_>) = mlp.norms.iter_mut().map(|n| (&mut n.gamma, &mut n.beta)).unzip();
    for g in gammas {
        out.push(g.as_slice_mut().expect("standard layout"));
    }
    for b in betas {
        out.push(b.as_slice_mut().expect("standard layout"));
    }
    out
}

pub(crate) fn grad_blocks(g: &MlpGrads) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    out.extend(g.weights.iter().map(|w| w.iter().copied().collect()));
    out.extend(g.biases.iter().map(|b| b.to_vec()));
    out.extend(g.gammas.iter().map(|b| b.to_vec()));
    out.extend(g.betas.iter().map(|b| b.to_vec()));
    out
}

/// Loss and gradients of a train-mode batch.
pub(crate) fn batch_loss(
    mlp: &Mlp,
    x: &Array2<f64>,
    labels: &[AffectLabel],
    mix: (f64, f64, f64),
) -> Result<(f64, MlpGrads)> {
    let (out, cache) = mlp.forward(x.view(), Mode::Train)?;
    let preds = outputs_to_predictions(&out, Mode::Train);
    let loss = recognition_loss(&preds, labels, mix.0, mix.1, mix.2)?;
    let mut g = Array2::zeros(out.dim());
    for (r, pg) in loss.grads.iter().enumerate() {
        g[(r, 0)] = pg.valence;
        g[(r, 1)] = pg.arousal;
        for (k, v) in pg.logits.iter().enumerate() {
            g[(r, 2 + k)] = *v;
        }
    }
    Ok((loss.total, mlp.backward(&cache, &g)))
}

fn evaluate(mlp: &Mlp, samples: &[TrainSample], idx: &[usize]) -> Result<(f64, f64)> {
    let x = stack(samples, idx, mlp.config.input_dim);
    let labels: Vec<AffectLabel> = idx.iter().map(|&i| samples[i].label).collect();
    let (out, _) = mlp.forward(x.view(), Mode::Eval)?;
    let preds = outputs_to_predictions(&out, Mode::Eval);
    let loss = if idx.len() >= 2 {
        recognition_loss(&preds, &labels, 1.0, 1.0, 1.0)?.total
    } else {
        recognition_loss(&preds, &labels, 1.0, 0.0, 0.0)?.total
    };
    let correct = preds
        .iter()
        .zip(&labels)
        .filter(|(p, l)| argmax(&p.logits) == l.class)
        .count();
    Ok((loss, correct as f64 / idx.len() as f64))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Train `mlp` in place of its current weights; standardization statistics
/// are recomputed from the training split.
pub fn train_mlp(mut mlp: Mlp, samples: &[TrainSample], config: &TrainConfig) -> Result<TrainOutcome> {
    mlp.validate()?;
    let dim = mlp.config.input_dim;
    if samples.len() < 3 {
        return Err(Error::Param("training needs at least 3 samples".into()));
    }
    if config.batch_size < 2 || config.epochs == 0 {
        return Err(Error::Param("batch size must be >= 2 and epochs >= 1".into()));
    }
    if !(0.0..1.0).contains(&config.val_fraction) {
        return Err(Error::Param(format!("val_fraction {} outside [0, 1)", config.val_fraction)));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.input.len() != dim {
            return Err(Error::Param(format!("sample {i} has {} inputs, expected {dim}", s.input.len())));
        }
        if s.label.class >= mlp.config.n_classes {
            return Err(Error::Param(format!("sample {i} class {} out of range", s.label.class)));
        }
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut substream(config.seed, "mlp-split"));
    let n_val = ((samples.len() as f64) * config.val_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val.min(samples.len() - 2));
    let val_idx: Vec<usize> = if val_idx.is_empty() { train_idx.to_vec() } else { val_idx.to_vec() };
    let mut train_idx = train_idx.to_vec();

    let train_x = stack(samples, &train_idx, dim);
    let mean = train_x.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let std = train_x.std_axis(ndarray::Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    mlp.input_mean = mean;
    mlp.input_std = std;
    mlp.set_running_stats(train_x.view())?;

    let sizes: Vec<usize> = {
        let blocks = param_blocks(&mut mlp);
        blocks.iter().map(|b| b.len()).collect()
    };
    let mut adam = Adam::new(config.adam, &sizes);
    let mut shuffle_rng = substream(config.seed, "mlp-shuffle");
    let mut mix_rng = substream(config.seed, "shake-shake");

    let mut trace = Vec::with_capacity(config.epochs);
    let mut best = mlp.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for (b, chunk) in train_idx.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mix = if config.shake_shake {
                (mix_rng.random::<f64>(), mix_rng.random::<f64>(), mix_rng.random::<f64>())
            } else {
                (1.0, 1.0, 1.0)
            };
            // all three zero has probability zero but would be an invalid mix
            let mix = if mix.0 + mix.1 + mix.2 > 0.0 { mix } else { (1.0, 1.0, 1.0) };
            let x = stack(samples, chunk, dim);
            let labels: Vec<AffectLabel> = chunk.iter().map(|&i| samples[i].label).collect();
            let (loss, grads) = batch_loss(&mlp, &x, &labels, mix)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            let g = grad_blocks(&grads);
            let g_refs: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
            adam.step(&mut param_blocks(&mut mlp), &g_refs);
            loss_sum += loss;
            n_batches += 1;
        }
        mlp.set_running_stats(train_x.view())?;
        let (val_loss, val_accuracy) = evaluate(&mlp, samples, &val_idx)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite validation loss at epoch {epoch}")));
        }
        trace.push(EpochStats {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_loss,
            val_accuracy,
        });
        log::debug!("epoch {epoch}: val loss {val_loss:.6}, val acc {val_accuracy:.3}");
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best = mlp.clone();
        }
    }
    Ok(TrainOutcome { best, best_epoch, last: mlp, trace })
}

