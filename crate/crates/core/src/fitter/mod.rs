//! Expression retargeting by gradient descent on the emotion feature distance,
//! and a small self-supervised expression encoder trained on rendered data.
//!
//! Retargeting minimizes `||eps_R(psi) - eps_T||_2 + lambda_psi ||psi||^2`
//! over `psi` only; identity and albedo come from the source, pose, lighting
//! and camera from the target. By default each step uses a backtracking
//! (Armijo) line search, so the recorded objective never increases.

mod dataset;
mod encoder;
mod export;

use serde::{Deserialize, Serialize};

use crate::emotion_feature::FeatureExtractor;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::face_model::{FaceModel, FaceParams};
use crate::losses::{total_loss, LossOptions, LossTarget, LossWeights};
use crate::renderer::Image;

pub use dataset::{make_synthetic_dataset, synthetic_label, SyntheticConfig, SyntheticSample, FRAMING_SCALE};
pub use encoder::{
    encoder_params, encoder_sample_loss, train_expression_encoder, EncoderConfig, EncoderEpoch, EncoderTrainConfig,
    EncoderTrainOutcome, ExpressionEncoder,
};
pub use export::{export_params_csv, param_rows, read_params_csv, write_param_rows, ParamRow};

pub const ARMIJO_C: f64 = 1e-4;
pub const SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct RetargetProblem {
    /// Supplies identity `beta` and albedo `alpha`.
    pub source: FaceParams,
    /// Supplies pose `theta`, lighting and camera.
    pub target: FaceParams,
    pub target_feature: Vec<f64>,
    pub init_psi: Vec<f64>,
    pub lambda_psi: f64,
    /// Initial trial step of the line search, or the fixed step.
    pub step: f64,
    pub max_iters: usize,
    /// Stop when `||grad||_inf` falls below this.
    pub grad_tol: f64,
    /// Stop when the objective changed by less than this (relative) over `plateau_window` iterations.
    pub rel_tol: f64,
    pub plateau_window: usize,
    /// Plain fixed-step gradient descent instead of the line search.
    pub fixed_step: bool,
    /// Optimize the jaw rotation jointly with `psi` under an L2 prior (experimental).
    pub optimize_jaw: bool,
    pub jaw_prior: f64,
    pub image_size: (usize, usize),
    /// Record `psi` every this many iterations (0 disables snapshots).
    pub snapshot_every: usize,
}

impl RetargetProblem {
    pub fn new(source: FaceParams, target: FaceParams, target_feature: Vec<f64>) -> Self {
        let init_psi = vec![0.0; source.psi.len()];
        RetargetProblem {
            source,
            target,
            target_feature,
            init_psi,
            lambda_psi: 1e-3,
            step: 1.0,
            max_iters: 2000,
            grad_tol: 1e-6,
            rel_tol: 1e-8,
            plateau_window: 10,
            fixed_step: false,
            optimize_jaw: false,
            jaw_prior: 1e-2,
            image_size: (64, 64),
            snapshot_every: 10,
        }
    }

    pub fn validate(&self, model: &FaceModel, extractor: &FeatureExtractor) -> Result<()> {
        model.check_params(&self.source)?;
        model.check_params(&self.target)?;
        let checks = [
            (self.lambda_psi >= 0.0 && self.lambda_psi.is_finite(), "lambda_psi must be finite and >= 0"),
            (self.step > 0.0 && self.step.is_finite(), "step must be positive"),
            (self.grad_tol >= 0.0 && self.rel_tol >= 0.0, "tolerances must be >= 0"),
            (self.plateau_window >= 1, "plateau window must be at least 1"),
            (self.jaw_prior >= 0.0 && self.jaw_prior.is_finite(), "jaw prior must be finite and >= 0"),
            (self.image_size.0 > 0 && self.image_size.1 > 0, "image size must be positive"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Param((*msg).into()));
        }
        if self.init_psi.len() != model.n_psi {
            return Err(Error::Param(format!("init psi has {} entries, model has {}", self.init_psi.len(), model.n_psi)));
        }
        if self.target_feature.len() != extractor.feature_dim() {
            return Err(Error::Param(format!(
                "target feature has {} entries, extractor produces {}",
                self.target_feature.len(),
                extractor.feature_dim()
            )));
        }
        crate::error::ensure_finite("target feature", &self.target_feature)?;
        crate::error::ensure_finite("init psi", &self.init_psi)
    }

    /// Source identity and albedo combined with target pose, lighting and camera.
    pub fn compose(&self, psi: &[f64], jaw: Option<[f64; 3]>, model: &FaceModel) -> FaceParams {
        let mut p = self.target.clone();
        p.beta = self.source.beta.clone();
        p.alpha = self.source.alpha.clone();
        p.psi = psi.to_vec();
        if let Some(j) = jaw {
            let o = model.jaw_offset();
            p.theta[o..o + 3].copy_from_slice(&j);
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    Plateau,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub grad_inf: f64,
    /// Step taken after this evaluation (0 on the last row).
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub rows: Vec<TraceRow>,
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub termination: Termination,
}

impl OptTrace {
    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].objective <= w[0].objective)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetargetResult {
    pub psi: Vec<f64>,
    /// Final jaw rotation (the target's unless jaw optimization is enabled).
    pub jaw: [f64; 3],
    pub params: FaceParams,
    pub trace: OptTrace,
}

struct Objective<'a> {
    model: &'a FaceModel,
    extractor: &'a FeatureExtractor,
    problem: &'a RetargetProblem,
    blank: Image,
    keypoints: Vec<[f64; 2]>,
    weights: LossWeights,
}

impl<'a> Objective<'a> {
    fn new(model: &'a FaceModel, extractor: &'a FeatureExtractor, problem: &'a RetargetProblem) -> Self {
        let mut weights = LossWeights::zero();
        weights.lambda_emo = 1.0;
        weights.lambda_psi = problem.lambda_psi;
        let (w, h) = problem.image_size;
        Objective {
            model,
            extractor,
            problem,
            blank: Image::zeros(w, h),
            keypoints: vec![[0.0; 2]; model.landmarks.len()],
            weights,
        }
    }

    fn n_vars(&self) -> usize {
        self.model.n_psi + if self.problem.optimize_jaw { 3 } else { 0 }
    }

    fn split(&self, x: &[f64]) -> (Vec<f64>, [f64; 3]) {
        let n = self.model.n_psi;
        let jaw = if self.problem.optimize_jaw {
            [x[n], x[n + 1], x[n + 2]]
        } else {
            let o = self.model.jaw_offset();
            [self.problem.target.theta[o], self.problem.target.theta[o + 1], self.problem.target.theta[o + 2]]
        };
        (x[..n].to_vec(), jaw)
    }

    /// Objective value and gradient with respect to the free variables.
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (psi, jaw) = self.split(x);
        let params = self.problem.compose(&psi, Some(jaw), self.model);
        let target = LossTarget { image: &self.blank, keypoints: &self.keypoints, feature: Some(&self.problem.target_feature) };
        let opts = LossOptions { normalize_photometric: false, exec: Exec::Sequential };
        let report = total_loss(self.model, &params, &target, self.extractor, &self.weights, &opts)?;
        let mut value = report.total;
        let mut grad = report.grad.psi;
        if self.problem.optimize_jaw {
            let o = self.model.jaw_offset();
            for (i, j) in jaw.iter().enumerate() {
                value += self.problem.jaw_prior * j * j;
                grad.push(report.grad.theta[o + i] + 2.0 * self.problem.jaw_prior * j);
            }
        }
        Ok((value, grad))
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Objective `d(eps_R(psi), eps_T) + lambda_psi ||psi||^2` and its gradient, at `psi`.
pub fn retarget_objective(
    model: &FaceModel,
    extractor: &FeatureExtractor,
    problem: &RetargetProblem,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let obj = Objective::new(model, extractor, problem);
    if x.len() != obj.n_vars() {
        return Err(Error::Param(format!("expected {} variables, got {}", obj.n_vars(), x.len())));
    }
    obj.eval(x)
}

pub fn retarget_expression(
    model: &FaceModel,
    problem: &RetargetProblem,
    extractor: &FeatureExtractor,
) -> Result<RetargetResult> {
    problem.validate(model, extractor)?;
    let obj = Objective::new(model, extractor, problem);
    let mut x = problem.init_psi.clone();
    if problem.optimize_jaw {
        let o = model.jaw_offset();
        x.extend_from_slice(&problem.target.theta[o..o + 3]);
    }
    let (mut f, mut g) = obj.eval(&x)?;
    if !f.is_finite() {
        return Err(Error::Divergence("objective is not finite at the initial point".into()));
    }
    let mut rows: Vec<TraceRow> = Vec::new();
    let mut snapshots = Vec::new();
    let mut trial_step = problem.step;
    let termination = loop {
        let iter = rows.len();
        if problem.snapshot_every > 0 && iter % problem.snapshot_every == 0 {
            snapshots.push((iter, x[..model.n_psi].to_vec()));
        }
        let grad_inf = inf_norm(&g);
        rows.push(TraceRow { iter, objective: f, grad_inf, step: 0.0 });
        if grad_inf < problem.grad_tol {
            break Termination::GradientTolerance;
        }
        if iter >= problem.plateau_window {
            let old = rows[iter - problem.plateau_window].objective;
            if (old - f).abs() <= problem.rel_tol * old.abs().max(f64::MIN_POSITIVE) {
                break Termination::Plateau;
            }
        }
        if iter >= problem.max_iters {
            break Termination::MaxIterations;
        }
        let g2: f64 = g.iter().map(|v| v * v).sum();
        let step_to = |a: f64| -> Vec<f64> { x.iter().zip(&g).map(|(xi, gi)| xi - a * gi).collect() };
        if problem.fixed_step {
            let nx = step_to(problem.step);
            let (nf, ng) = obj.eval(&nx)?;
            if !nf.is_finite() {
                return Err(Error::Divergence(format!(
                    "objective became non-finite at iteration {} (last finite value {f:e}, {} trace rows)",
                    iter + 1,
                    rows.len()
                )));
            }
            rows.last_mut().expect("row pushed").step = problem.step;
            (x, f, g) = (nx, nf, ng);
            continue;
        }
        let mut a = trial_step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let nx = step_to(a);
            let (nf, ng) = obj.eval(&nx)?;
            if nf.is_finite() && nf <= f - ARMIJO_C * a * g2 {
                accepted = Some((nx, nf, ng));
                break;
            }
            a *= SHRINK;
        }
        let Some((nx, nf, ng)) = accepted else {
            break Termination::LineSearchFailed;
        };
        rows.last_mut().expect("row pushed").step = a;
        // let the next search start a little larger than what worked
        trial_step = (a * 2.0).min(problem.step);
        (x, f, g) = (nx, nf, ng);
    };
    let (psi, jaw) = obj.split(&x);
    let params = problem.compose(&psi, Some(jaw), model);
    Ok(RetargetResult { psi, jaw, params, trace: OptTrace { rows, snapshots, termination } })
}

/// Independent retargeting runs, each with isolated state.
pub fn retarget_sweep(
    model: &FaceModel,
    problems: &[RetargetProblem],
    extractor: &FeatureExtractor,
    exec: Exec,
) -> Vec<Result<RetargetResult>> {
    exec.map(problems.len(), |i| retarget_expression(model, &problems[i], extractor))
}
