//! Affect regression and classification metrics.
//!
//! Variances are population variances (divide by `n`). `sign(0) = 0`, so a
//! zero ground-truth value only agrees with a zero prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance below which PCC and CCC are reported as undefined.
pub const METRIC_VARIANCE_FLOOR: f64 = 1e-12;

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Param(format!("length mismatch: {} vs {}", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::Param("metrics need at least one value".into()));
    }
    Ok(())
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let mse = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    Ok(mse.sqrt())
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

pub fn sagr(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let agree = y.iter().zip(y_hat).filter(|(a, b)| sign(**a) == sign(**b)).count();
    Ok(agree as f64 / y.len() as f64)
}

struct Moments {
    mean_y: f64,
    mean_p: f64,
    var_y: f64,
    var_p: f64,
    cov: f64,
}

fn moments(y: &[f64], y_hat: &[f64]) -> Result<Moments> {
    check_pair(y, y_hat)?;
    if y.len() < 2 {
        return Err(Error::UndefinedMetric("correlation needs at least two values".into()));
    }
    let n = y.len() as f64;
    let mean_y = y.iter().sum::<f64>() / n;
    let mean_p = y_hat.iter().sum::<f64>() / n;
    let (mut var_y, mut var_p, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(y_hat) {
        let (da, db) = (a - mean_y, b - mean_p);
        var_y += da * da;
        var_p += db * db;
        cov += da * db;
    }
    let m = Moments { mean_y, mean_p, var_y: var_y / n, var_p: var_p / n, cov: cov / n };
    if m.var_y < METRIC_VARIANCE_FLOOR || m.var_p < METRIC_VARIANCE_FLOOR {
        return Err(Error::UndefinedMetric(format!(
            "variance below {METRIC_VARIANCE_FLOOR:e} (ground truth {:e}, prediction {:e})",
            m.var_y, m.var_p
        )));
    }
    Ok(m)
}

pub fn pcc(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    let m = moments(y, y_hat)?;
    Ok((m.cov / (m.var_y.sqrt() * m.var_p.sqrt())).clamp(-1.0, 1.0))
}

/// `2 s_y s_p PCC / (s_y^2 + s_p^2 + (mu_y - mu_p)^2)`.
pub fn ccc(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    let m = moments(y, y_hat)?;
    let (sy, sp) = (m.var_y.sqrt(), m.var_p.sqrt());
    let r = (m.cov / (sy * sp)).clamp(-1.0, 1.0);
    Ok(2.0 * sy * sp * r / (m.var_y + m.var_p + (m.mean_y - m.mean_p).powi(2)))
}

pub fn accuracy(labels: &[usize], predicted: &[usize]) -> Result<f64> {
    if labels.len() != predicted.len() || labels.is_empty() {
        return Err(Error::Param("accuracy needs equal nonzero lengths".into()));
    }
    Ok(labels.iter().zip(predicted).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalMetrics {
    pub rmse: f64,
    pub sagr: f64,
    /// `None` when undefined (constant signal).
    pub pcc: Option<f64>,
    pub ccc: Option<f64>,
}

impl SignalMetrics {
    pub fn compute(y: &[f64], y_hat: &[f64]) -> Result<Self> {
        let undefined_ok = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(SignalMetrics {
            rmse: rmse(y, y_hat)?,
            sagr: sagr(y, y_hat)?,
            pcc: undefined_ok(pcc(y, y_hat))?,
            ccc: undefined_ok(ccc(y, y_hat))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub valence: Option<SignalMetrics>,
    pub arousal: Option<SignalMetrics>,
    pub accuracy: Option<f64>,
}
