//! Emotion recognition directly from face-model parameters.
//!
//! A 4-layer MLP maps the concatenation `(beta, psi, theta_jaw)` (optionally
//! followed by an extra vector) to valence, arousal and expression logits.
//! Each hidden layer is dense -> batch norm -> LeakyReLU. Inputs are
//! standardized per dimension with statistics of the training split.

mod io;
mod train;

pub(crate) use train::{batch_loss, grad_blocks, param_blocks};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};

use crate::emotion_feature::EmotionPrediction;
use crate::error::{Error, Result};
use crate::face_model::{FaceModel, FaceParams};
use crate::rng::substream;

pub use io::{read_mlp, write_mlp, MLP_MAGIC};
pub use train::{argmax, train_mlp, EpochStats, TrainConfig, TrainOutcome, TrainSample};

pub const DEFAULT_HIDDEN: usize = 2048;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub leaky_slope: f64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        MlpConfig { input_dim, hidden: DEFAULT_HIDDEN, n_classes, leaky_slope: LEAKY_SLOPE }
    }

    pub fn output_dim(&self) -> usize {
        2 + self.n_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(n: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    /// Four dense layers, weights `out x in`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// One per hidden layer.
    pub norms: Vec<BatchNorm>,
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Saved intermediates of a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    mode: Mode,
    /// Input to each dense layer.
    inputs: Vec<Array2<f64>>,
    /// Normalized pre-affine batch-norm values per hidden layer.
    pub normalized: Vec<Array2<f64>>,
    /// Affine batch-norm output (LeakyReLU input).
    affine: Vec<Array2<f64>>,
    inv_std: Vec<Array1<f64>>,
    /// Batch statistics per hidden layer (train mode only).
    pub batch_stats: Vec<(Array1<f64>, Array1<f64>)>,
}

/// Gradients laid out like [`Mlp::weights`], [`Mlp::biases`] and the norm affines.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub gammas: Vec<Array1<f64>>,
    pub betas: Vec<Array1<f64>>,
}

impl Mlp {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.hidden == 0 || config.n_classes == 0 {
            return Err(Error::Param("MLP dimensions must be positive".into()));
        }
        let mut rng = substream(seed, "mlp-init");
        let dims = [config.input_dim, config.hidden, config.hidden, config.hidden, config.output_dim()];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..4 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(&mut rng)));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Mlp {
            config,
            weights,
            biases,
            norms: (0..3).map(|_| BatchNorm::new(config.hidden)).collect(),
            input_mean: Array1::zeros(config.input_dim),
            input_std: Array1::ones(config.input_dim),
        })
    }

    /// Every weight, bias and norm parameter set to zero (norm scales to one).
    pub fn zeroed(config: MlpConfig) -> Result<Self> {
        let mut mlp = Mlp::new(config, 0)?;
        mlp.weights.iter_mut().for_each(|w| w.fill(0.0));
        Ok(mlp)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        let dims = [c.input_dim, c.hidden, c.hidden, c.hidden, c.output_dim()];
        if self.weights.len() != 4 || self.biases.len() != 4 || self.norms.len() != 3 {
            return Err(Error::Param("MLP must have 4 dense layers and 3 norms".into()));
        }
        for l in 0..4 {
            if self.weights[l].dim() != (dims[l + 1], dims[l]) || self.biases[l].len() != dims[l + 1] {
                return Err(Error::Param(format!("layer {l} shape does not chain")));
            }
        }
        for n in &self.norms {
            if n.running_var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Param("batch-norm running variance must be positive".into()));
            }
        }
        if self.input_mean.len() != c.input_dim || self.input_std.len() != c.input_dim {
            return Err(Error::Param("standardization length mismatch".into()));
        }
        Ok(())
    }

    fn standardize(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            row -= &self.input_mean;
            row /= &self.input_std;
        }
        out
    }

    /// Raw network outputs (`batch x (2 + classes)`) and the cache for backprop.
    pub fn forward(&self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<(Array2<f64>, MlpCache)> {
        let (batch, dim) = x.dim();
        if dim != self.config.input_dim {
            return Err(Error::Param(format!("input has {dim} columns, expected {}", self.config.input_dim)));
        }
        if mode == Mode::Train && batch < 2 {
            return Err(Error::Param("train-mode batch norm needs a batch of at least 2".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("MLP input is not finite".into()));
        }
        let mut cache = MlpCache {
            mode,
            inputs: Vec::with_capacity(4),
            normalized: Vec::new(),
            affine: Vec::new(),
            inv_std: Vec::new(),
            batch_stats: Vec::new(),
        };
        let mut h = self.standardize(x);
        for l in 0..3 {
            let z = h.dot(&self.weights[l].t()) + &self.biases[l];
            cache.inputs.push(h);
            let bn = &self.norms[l];
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
                    let var = z.var_axis(Axis(0), 0.0);
                    cache.batch_stats.push((mean.clone(), var.clone()));
                    (mean, var)
                }
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let xhat = (&z - &mean) * &inv_std;
            let y = &xhat * &bn.gamma + &bn.beta;
            let slope = self.config.leaky_slope;
            h = y.mapv(|v| leaky_relu(v, slope));
            cache.normalized.push(xhat);
            cache.affine.push(y);
            cache.inv_std.push(inv_std);
        }
        let out = h.dot(&self.weights[3].t()) + &self.biases[3];
        cache.inputs.push(h);
        Ok((out, cache))
    }

    /// Predictions for a batch; in eval mode valence and arousal are clamped to `[-1, 1]`.
    pub fn predict(&self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<Vec<EmotionPrediction>> {
        let (out, _) = self.forward(x, mode)?;
        Ok(outputs_to_predictions(&out, mode))
    }

    pub fn backward(&self, cache: &MlpCache, grad_out: &Array2<f64>) -> MlpGrads {
        let n = grad_out.nrows() as f64;
        let mut weights = vec![Array2::zeros((0, 0)); 4];
        let mut biases = vec![Array1::zeros(0); 4];
        let mut gammas = vec![Array1::zeros(0); 3];
        let mut betas = vec![Array1::zeros(0); 3];

        weights[3] = grad_out.t().dot(&cache.inputs[3]);
        biases[3] = grad_out.sum_axis(Axis(0));
        let mut g = grad_out.dot(&self.weights[3]);
        for l in (0..3).rev() {
            let slope = self.config.leaky_slope;
            let dy = &g * &cache.affine[l].mapv(|v| if v >= 0.0 { 1.0 } else { slope });
            let xhat = &cache.normalized[l];
            gammas[l] = (&dy * xhat).sum_axis(Axis(0));
            betas[l] = dy.sum_axis(Axis(0));
            let dxhat = &dy * &self.norms[l].gamma;
            let dz = match cache.mode {
                Mode::Train => {
                    // dz = inv_std / n * (n dxhat - sum(dxhat) - xhat * sum(dxhat xhat))
                    let sum_d = dxhat.sum_axis(Axis(0));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                    let inner = &dxhat * n - &sum_d - &(xhat * &sum_dx);
                    inner * &cache.inv_std[l] / n
                }
                Mode::Eval => &dxhat * &cache.inv_std[l],
            };
            weights[l] = dz.t().dot(&cache.inputs[l]);
            biases[l] = dz.sum_axis(Axis(0));
            g = dz.dot(&self.weights[l]);
        }
        MlpGrads { weights, biases, gammas, betas }
    }

    /// Recompute every running statistic from `x` in one pass.
    pub fn set_running_stats(&mut self, x: ArrayView2<'_, f64>) -> Result<()> {
        let (_, cache) = self.forward(x, Mode::Train)?;
        for (bn, (mean, var)) in self.norms.iter_mut().zip(cache.batch_stats) {
            bn.running_mean = mean;
            bn.running_var = var.mapv(|v| v.max(f64::MIN_POSITIVE));
        }
        Ok(())
    }
}

pub fn outputs_to_predictions(out: &Array2<f64>, mode: Mode) -> Vec<EmotionPrediction> {
    out.rows()
        .into_iter()
        .map(|row| {
            let (v, a) = (row[0], row[1]);
            let (v, a) = match mode {
                Mode::Eval => (v.clamp(-1.0, 1.0), a.clamp(-1.0, 1.0)),
                Mode::Train => (v, a),
            };
            EmotionPrediction { valence: v, arousal: a, logits: row.iter().skip(2).copied().collect() }
        })
        .collect()
}

/// `(beta, psi, theta_jaw)` followed by `extra` (e.g. a detail code).
pub fn params_vector(model: &FaceModel, params: &FaceParams, extra: Option<&[f64]>) -> Vec<f64> {
    let jaw = model.jaw_offset();
    let mut v = Vec::with_capacity(model.n_beta + model.n_psi + 3);
    v.extend_from_slice(&params.beta);
    v.extend_from_slice(&params.psi);
    v.extend_from_slice(&params.theta[jaw..jaw + 3]);
    if let Some(e) = extra {
        v.extend_from_slice(e);
    }
    v
}

#[cfg(test)]
mod tests;
