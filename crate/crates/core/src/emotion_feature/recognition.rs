//! Affect prediction head and the recognition loss
//! `L = L_cat + (a * L_mse + b * L_pcc + c * L_ccc) / (a + b + c)`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// Seven basic expressions plus neutral.
pub const N_EXPRESSIONS: usize = 8;

/// Below this variance a correlation is treated as undefined.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionPrediction {
    pub valence: f64,
    pub arousal: f64,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffectLabel {
    pub valence: f64,
    pub arousal: f64,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrad {
    pub valence: f64,
    pub arousal: f64,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionLoss {
    pub total: f64,
    pub categorical: f64,
    /// `MSE_valence + MSE_arousal`.
    pub mse: f64,
    /// `1 - (PCC_valence + PCC_arousal) / 2`.
    pub pcc: f64,
    /// `1 - (CCC_valence + CCC_arousal) / 2`.
    pub ccc: f64,
    pub grads: Vec<PredictionGrad>,
}

/// Linear head mapping a feature vector to valence, arousal and class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AffectHead {
    pub inputs: usize,
    pub n_classes: usize,
    /// `(2 + n_classes) x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffectHead {
    pub fn reference(seed: u64, inputs: usize) -> Self {
        let mut rng = substream(seed, "affect-head");
        let outputs = 2 + N_EXPRESSIONS;
        let dist = Normal::new(0.0, 1.0 / (inputs as f64).sqrt()).expect("positive std");
        AffectHead {
            inputs,
            n_classes: N_EXPRESSIONS,
            weights: (0..outputs * inputs).map(|_| dist.sample(&mut rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    /// Evaluation-mode prediction: valence and arousal clamped to `[-1, 1]`.
    pub fn predict(&self, feature: &[f64]) -> Result<EmotionPrediction> {
        if feature.len() != self.inputs {
            return Err(Error::Param(format!("head expects {} inputs, got {}", self.inputs, feature.len())));
        }
        let out: Vec<f64> = (0..2 + self.n_classes)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(feature).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        Ok(EmotionPrediction {
            valence: out[0].clamp(-1.0, 1.0),
            arousal: out[1].clamp(-1.0, 1.0),
            logits: out[2..].to_vec(),
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Guarded PCC and its gradient with respect to the predictions.
fn pcc_with_grad(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let (mp, mg) = (mean(pred), mean(gt));
    let a: Vec<f64> = pred.iter().map(|p| p - mp).collect();
    let b: Vec<f64> = gt.iter().map(|g| g - mg).collect();
    let var_p = a.iter().map(|x| x * x).sum::<f64>() / n;
    let var_g = b.iter().map(|x| x * x).sum::<f64>() / n;
    if var_p < VARIANCE_FLOOR || var_g < VARIANCE_FLOOR {
        log::debug!("PCC undefined (variance {var_p:e}, {var_g:e}); using 0");
        return (0.0, vec![0.0; pred.len()]);
    }
    let cov = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n;
    let denom = (var_p * var_g).sqrt();
    let r = cov / denom;
    let grad = a.iter().zip(&b).map(|(ai, bi)| bi / (n * denom) - r * ai / (n * var_p)).collect();
    (r, grad)
}

/// CCC with variances floored at [`VARIANCE_FLOOR`], and its gradient.
fn ccc_with_grad(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let (mp, mg) = (mean(pred), mean(gt));
    let a: Vec<f64> = pred.iter().map(|p| p - mp).collect();
    let b: Vec<f64> = gt.iter().map(|g| g - mg).collect();
    let raw_var_p = a.iter().map(|x| x * x).sum::<f64>() / n;
    let raw_var_g = b.iter().map(|x| x * x).sum::<f64>() / n;
    let pred_floored = raw_var_p < VARIANCE_FLOOR;
    // 2 sigma sigma' PCC == 2 cov, and PCC is 0 once either variance is floored
    let guarded = pred_floored || raw_var_g < VARIANCE_FLOOR;
    let var_p = raw_var_p.max(VARIANCE_FLOOR);
    let var_g = raw_var_g.max(VARIANCE_FLOOR);
    let cov = if guarded { 0.0 } else { a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n };
    let num = 2.0 * cov;
    let den = var_p + var_g + (mp - mg).powi(2);
    let grad = a
        .iter()
        .zip(&b)
        .map(|(ai, bi)| {
            let dnum = if guarded { 0.0 } else { 2.0 * bi / n };
            let dvar = if pred_floored { 0.0 } else { 2.0 * ai / n };
            let dden = dvar + 2.0 * (mp - mg) / n;
            (dnum * den - num * dden) / (den * den)
        })
        .collect();
    (num / den, grad)
}

/// Recognition loss over a batch, with gradients on every prediction.
///
/// `alpha`, `beta`, `gamma` are the mixing coefficients of the regression
/// terms; they must be nonnegative with a positive sum. Correlation terms
/// need a batch of at least two.
pub fn recognition_loss(
    preds: &[EmotionPrediction],
    labels: &[AffectLabel],
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<RecognitionLoss> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Param(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if [alpha, beta, gamma].iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || alpha + beta + gamma <= 0.0 {
        return Err(Error::Param(format!("invalid mixing coefficients ({alpha}, {beta}, {gamma})")));
    }
    let n = preds.len();
    if n < 2 && beta + gamma > 0.0 {
        return Err(Error::Contract("correlation losses need a batch of at least 2".into()));
    }
    let sum = alpha + beta + gamma;
    let (wa, wb, wc) = (alpha / sum, beta / sum, gamma / sum);
    let nf = n as f64;

    let mut grads: Vec<PredictionGrad> = preds
        .iter()
        .map(|p| PredictionGrad { valence: 0.0, arousal: 0.0, logits: vec![0.0; p.logits.len()] })
        .collect();

    let mut categorical = 0.0;
    for ((p, l), g) in preds.iter().zip(labels).zip(&mut grads) {
        if l.class >= p.logits.len() {
            return Err(Error::Param(format!("class {} outside {} logits", l.class, p.logits.len())));
        }
        let max = p.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = p.logits.iter().map(|x| (x - max).exp()).sum();
        let log_z = max + z.ln();
        categorical += (log_z - p.logits[l.class]) / nf;
        for (k, gk) in g.logits.iter_mut().enumerate() {
            let prob = (p.logits[k] - log_z).exp();
            *gk = (prob - if k == l.class { 1.0 } else { 0.0 }) / nf;
        }
    }

    let pv: Vec<f64> = preds.iter().map(|p| p.valence).collect();
    let pa: Vec<f64> = preds.iter().map(|p| p.arousal).collect();
    let gv: Vec<f64> = labels.iter().map(|l| l.valence).collect();
    let ga: Vec<f64> = labels.iter().map(|l| l.arousal).collect();

    let mse_of = |p: &[f64], t: &[f64]| p.iter().zip(t).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / nf;
    let mse = mse_of(&pv, &gv) + mse_of(&pa, &ga);
    for (i, g) in grads.iter_mut().enumerate() {
        g.valence += wa * 2.0 * (pv[i] - gv[i]) / nf;
        g.arousal += wa * 2.0 * (pa[i] - ga[i]) / nf;
    }

    let (mut pcc, mut ccc) = (0.0, 0.0);
    if n >= 2 {
        let (rv, drv) = pcc_with_grad(&pv, &gv);
        let (ra, dra) = pcc_with_grad(&pa, &ga);
        pcc = 1.0 - (rv + ra) / 2.0;
        let (cv, dcv) = ccc_with_grad(&pv, &gv);
        let (ca, dca) = ccc_with_grad(&pa, &ga);
        ccc = 1.0 - (cv + ca) / 2.0;
        for (i, g) in grads.iter_mut().enumerate() {
            g.valence -= 0.5 * (wb * drv[i] + wc * dcv[i]);
            g.arousal -= 0.5 * (wb * dra[i] + wc * dca[i]);
        }
    }

    let total = categorical + wa * mse + wb * pcc + wc * ccc;
    Ok(RecognitionLoss { total, categorical, mse, pcc, ccc, grads })
}
