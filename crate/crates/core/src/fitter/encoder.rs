use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::SyntheticSample;
use crate::emotion_feature::FeatureExtractor;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::face_model::{FaceModel, FaceParams};
use crate::losses::{total_loss, LossOptions, LossReport, LossTarget, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::renderer::Image;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// The image is box-averaged down to `grid x grid` RGB cells.
    pub grid: usize,
    /// Width of the tanh hidden layer; 0 leaves only a constant output.
    pub hidden: usize,
    pub n_psi: usize,
}

/// `image -> psi`: box-downsampled pixels, one tanh hidden layer, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionEncoder {
    pub config: EncoderConfig,
    /// `hidden x inputs`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `n_psi x hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Per-input standardization, fitted on the training split.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

struct EncoderCache {
    x: Vec<f64>,
    h: Vec<f64>,
}

impl ExpressionEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.grid == 0 || config.n_psi == 0 {
            return Err(Error::Param("encoder grid and output size must be positive".into()));
        }
        let inputs = config.grid * config.grid * 3;
        let mut rng = substream(seed, "encoder-init");
        let mut gaussian = |n: usize, std: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let hidden = config.hidden;
        let w1 = gaussian(hidden * inputs, 1.0 / (inputs as f64).sqrt());
        let w2 = gaussian(config.n_psi * hidden, 0.1 / (hidden.max(1) as f64).sqrt());
        Ok(ExpressionEncoder {
            config,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; config.n_psi],
            input_mean: vec![0.0; inputs],
            input_std: vec![1.0; inputs],
        })
    }

    pub fn inputs(&self) -> usize {
        self.config.grid * self.config.grid * 3
    }

    /// Box-averaged cell colors before standardization.
    pub fn pooled(&self, image: &Image) -> Result<Vec<f64>> {
        let g = self.config.grid;
        if image.width < g || image.height < g || image.data.len() != image.width * image.height * 3 {
            return Err(Error::Param(format!("image {}x{} is smaller than the {g}x{g} grid", image.width, image.height)));
        }
        let mut sums = vec![0.0; g * g * 3];
        let mut counts = vec![0usize; g * g];
        for y in 0..image.height {
            let gy = y * g / image.height;
            for x in 0..image.width {
                let cell = gy * g + x * g / image.width;
                counts[cell] += 1;
                for c in 0..3 {
                    sums[cell * 3 + c] += image.data[(y * image.width + x) * 3 + c];
                }
            }
        }
        Ok(sums.iter().enumerate().map(|(i, s)| s / counts[i / 3] as f64).collect())
    }

    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let mut x = self.pooled(image)?;
        x.iter_mut().enumerate().for_each(|(i, v)| *v = (*v - self.input_mean[i]) / self.input_std[i]);
        Ok(x)
    }

    /// Set the input standardization from a set of images.
    pub fn fit_standardization<'a>(&mut self, images: impl IntoIterator<Item = &'a Image>) -> Result<()> {
        let pooled: Vec<Vec<f64>> = images.into_iter().map(|im| self.pooled(im)).collect::<Result<_>>()?;
        if pooled.is_empty() {
            return Err(Error::Param("no images to fit the standardization on".into()));
        }
        let n = pooled.len() as f64;
        for i in 0..self.inputs() {
            let mean = pooled.iter().map(|p| p[i]).sum::<f64>() / n;
            let var = pooled.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / n;
            self.input_mean[i] = mean;
            self.input_std[i] = var.sqrt().max(1e-6);
        }
        Ok(())
    }

    fn forward_cached(&self, image: &Image) -> Result<(Vec<f64>, EncoderCache)> {
        let x = self.features(image)?;
        let (n_in, hidden) = (self.inputs(), self.config.hidden);
        let h: Vec<f64> = (0..hidden)
            .map(|j| {
                let row = &self.w1[j * n_in..(j + 1) * n_in];
                (self.b1[j] + row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        let psi = (0..self.config.n_psi)
            .map(|k| self.b2[k] + (0..hidden).map(|j| self.w2[k * hidden + j] * h[j]).sum::<f64>())
            .collect();
        Ok((psi, EncoderCache { x, h }))
    }

    pub fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_cached(image)?.0)
    }

    /// Parameter gradients in block order `w1, b1, w2, b2`.
    fn backward(&self, cache: &EncoderCache, grad_psi: &[f64]) -> Vec<Vec<f64>> {
        let (n_in, hidden) = (self.inputs(), self.config.hidden);
        let mut gw2 = vec![0.0; self.w2.len()];
        let mut gh = vec![0.0; hidden];
        for (k, &g) in grad_psi.iter().enumerate() {
            for j in 0..hidden {
                gw2[k * hidden + j] = g * cache.h[j];
                gh[j] += g * self.w2[k * hidden + j];
            }
        }
        let mut gw1 = vec![0.0; self.w1.len()];
        let mut gb1 = vec![0.0; hidden];
        for j in 0..hidden {
            let gz = gh[j] * (1.0 - cache.h[j] * cache.h[j]);
            gb1[j] = gz;
            for (i, &xi) in cache.x.iter().enumerate() {
                gw1[j * n_in + i] = gz * xi;
            }
        }
        vec![gw1, gb1, gw2, grad_psi.to_vec()]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub val_fraction: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub weights: LossWeights,
    pub normalize_photometric: bool,
    pub exec: Exec,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig { lr: 5e-5, ..AdamConfig::default() },
            seed: 0,
            val_fraction: 0.25,
            patience: 5,
            weights: LossWeights::default(),
            normalize_photometric: false,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderEpoch {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches (before each update); 0 for epoch 0.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderTrainOutcome {
    pub best: ExpressionEncoder,
    pub best_epoch: usize,
    /// Row 0 evaluates the untrained encoder.
    pub trace: Vec<EncoderEpoch>,
}

/// The sample's ground-truth parameters with `psi` replaced by the encoder output.
pub fn encoder_params(sample: &SyntheticSample, psi: &[f64]) -> FaceParams {
    let mut p = sample.params.clone();
    p.psi = psi.to_vec();
    p
}

/// Full fitting loss of one sample at the encoder's prediction.
pub fn encoder_sample_loss(
    model: &FaceModel,
    extractor: &FeatureExtractor,
    encoder: &ExpressionEncoder,
    sample: &SyntheticSample,
    weights: &LossWeights,
    normalize_photometric: bool,
) -> Result<(Vec<f64>, LossReport)> {
    let psi = encoder.predict(&sample.image)?;
    let target = LossTarget { image: &sample.image, keypoints: &sample.keypoints, feature: Some(&sample.feature) };
    let opts = LossOptions { normalize_photometric, exec: Exec::Sequential };
    let report = total_loss(model, &encoder_params(sample, &psi), &target, extractor, weights, &opts)?;
    Ok((psi, report))
}

pub(super) fn sample_grad(
    model: &FaceModel,
    extractor: &FeatureExtractor,
    encoder: &ExpressionEncoder,
    sample: &SyntheticSample,
    config: &EncoderTrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (psi, cache) = encoder.forward_cached(&sample.image)?;
    let target = LossTarget { image: &sample.image, keypoints: &sample.keypoints, feature: Some(&sample.feature) };
    let opts = LossOptions { normalize_photometric: config.normalize_photometric, exec: Exec::Sequential };
    let report = total_loss(model, &encoder_params(sample, &psi), &target, extractor, &config.weights, &opts)?;
    Ok((report.total, encoder.backward(&cache, &report.grad.psi)))
}

fn mean_loss(
    model: &FaceModel,
    extractor: &FeatureExtractor,
    encoder: &ExpressionEncoder,
    samples: &[SyntheticSample],
    idx: &[usize],
    config: &EncoderTrainConfig,
) -> Result<f64> {
    let losses: Vec<f64> = config
        .exec
        .map(idx.len(), |i| {
            encoder_sample_loss(model, extractor, encoder, &samples[idx[i]], &config.weights, config.normalize_photometric)
                .map(|(_, r)| r.total)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / idx.len() as f64)
}

/// Train only the encoder; every other parameter stays at the sample's ground truth.
pub fn train_expression_encoder(
    model: &FaceModel,
    mut encoder: ExpressionEncoder,
    samples: &[SyntheticSample],
    extractor: &FeatureExtractor,
    config: &EncoderTrainConfig,
) -> Result<EncoderTrainOutcome> {
    config.weights.validate()?;
    if samples.len() < 2 {
        return Err(Error::Param("encoder training needs at least 2 samples".into()));
    }
    if config.batch_size == 0 || !(0.0..1.0).contains(&config.val_fraction) {
        return Err(Error::Param("batch size must be positive and val_fraction in [0, 1)".into()));
    }
    if encoder.config.n_psi != model.n_psi {
        return Err(Error::Param(format!("encoder predicts {} coefficients, model has {}", encoder.config.n_psi, model.n_psi)));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut substream(config.seed, "encoder-split"));
    let n_val = ((samples.len() as f64 * config.val_fraction).round() as usize).clamp(1, samples.len() - 1);
    let val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();

    encoder.fit_standardization(train_idx.iter().map(|&i| &samples[i].image))?;
    let sizes: Vec<usize> = encoder.blocks_mut().iter().map(|b| b.len()).collect();
    let mut adam = Adam::new(config.adam, &sizes);
    let mut shuffle_rng = substream(config.seed, "encoder-shuffle");

    let initial = mean_loss(model, extractor, &encoder, samples, &val_idx, config)?;
    if !initial.is_finite() {
        return Err(Error::Divergence("initial validation loss is not finite".into()));
    }
    let mut trace = vec![EncoderEpoch { epoch: 0, train_loss: 0.0, val_loss: initial }];
    let (mut best, mut best_epoch, mut best_loss) = (encoder.clone(), 0, initial);
    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in train_idx.chunks(config.batch_size).enumerate() {
            let per_sample: Vec<(f64, Vec<Vec<f64>>)> = config
                .exec
                .map(batch.len(), |i| sample_grad(model, extractor, &encoder, &samples[batch[i]], config))
                .into_iter()
                .collect::<Result<_>>()?;
            // summed in batch order so the update does not depend on scheduling
            let mut grad: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let scale = 1.0 / batch.len() as f64;
            for (loss, g) in &per_sample {
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}, batch {b}")));
                }
                loss_sum += loss;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, v)| *a += scale * v);
                }
            }
            let refs: Vec<&[f64]> = grad.iter().map(Vec::as_slice).collect();
            adam.step(&mut encoder.blocks_mut(), &refs);
        }
        let val_loss = mean_loss(model, extractor, &encoder, samples, &val_idx, config)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite validation loss at epoch {epoch}")));
        }
        trace.push(EncoderEpoch { epoch, train_loss: loss_sum / train_idx.len() as f64, val_loss });
        log::debug!("encoder epoch {epoch}: val loss {val_loss:.6}");
        if val_loss < best_loss {
            (best, best_epoch, best_loss) = (encoder.clone(), epoch, val_loss);
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }
    Ok(EncoderTrainOutcome { best, best_epoch, trace })
}
