//! Loss terms of the expression-fitting objective and their gradients.
//!
//! `L = l_emo * L_emo + l_pho * L_pho + l_eye * L_eye + l_mc * L_mc + l_lc * L_lc + l_psi * L_psi`
//!
//! Every L1 term uses subgradient 0 at exact zeros.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::emotion_feature::FeatureExtractor;
use crate::error::{ensure_finite, Error, Result};
use crate::exec::Exec;
use crate::face_model::{FaceModel, FaceParams};
use crate::linalg::Vec3;
use crate::renderer::{self, Camera, Image, RasterOptions, RenderOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRole {
    EyeClosure,
    MouthClosure,
    LipCorner,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointPairSet {
    pub role: PairRole,
    pub pairs: Vec<(usize, usize)>,
}

impl KeypointPairSet {
    pub fn validate(&self, n_landmarks: usize) -> Result<()> {
        for &(i, j) in &self.pairs {
            if i >= n_landmarks || j >= n_landmarks {
                return Err(Error::Param(format!(
                    "pair ({i}, {j}) out of range for {n_landmarks} landmarks"
                )));
            }
            if i == j {
                return Err(Error::Param(format!("pair ({i}, {j}) repeats a landmark")));
            }
        }
        Ok(())
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_emo: f64,
    pub lambda_pho: f64,
    pub lambda_eye: f64,
    pub lambda_mc: f64,
    pub lambda_lc: f64,
    pub lambda_psi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_emo: 1.0,
            lambda_pho: 2.0,
            lambda_eye: 0.5,
            lambda_mc: 0.5,
            lambda_lc: 0.5,
            lambda_psi: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_emo: 0.0,
            lambda_pho: 0.0,
            lambda_eye: 0.0,
            lambda_mc: 0.0,
            lambda_lc: 0.0,
            lambda_psi: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.lambda_emo, self.lambda_pho, self.lambda_eye, self.lambda_mc, self.lambda_lc, self.lambda_psi]
    }

    pub fn validate(&self) -> Result<()> {
        let names = ["lambda_emo", "lambda_pho", "lambda_eye", "lambda_mc", "lambda_lc", "lambda_psi"];
        for (name, w) in names.iter().zip(self.as_array()) {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Param(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Value and gradients of one relative-keypoint term.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointLoss {
    pub value: f64,
    pub grad_landmarks: Vec<Vec3>,
    pub grad_keypoints: Vec<[f64; 2]>,
    pub grad_scale: f64,
}

/// `sum_(i,j) |(k_i - k_j) - s * Pi(M_i - M_j)|_1` over the pairs.
///
/// Keypoints live in camera-plane coordinates, the same space as
/// [`renderer::project`].
pub fn relative_keypoint_loss(
    keypoints: &[[f64; 2]],
    landmarks: &[Vec3],
    scale: f64,
    pairs: &KeypointPairSet,
) -> Result<KeypointLoss> {
    let n = landmarks.len();
    if keypoints.len() != n {
        return Err(Error::Param(format!("{} keypoints for {n} landmarks", keypoints.len())));
    }
    pairs.validate(n)?;
    let mut out = KeypointLoss {
        value: 0.0,
        grad_landmarks: vec![[0.0; 3]; n],
        grad_keypoints: vec![[0.0; 2]; n],
        grad_scale: 0.0,
    };
    if pairs.pairs.is_empty() {
        warn!("relative keypoint loss over an empty {:?} pair set", pairs.role);
        return Ok(out);
    }
    for &(i, j) in &pairs.pairs {
        for c in 0..2 {
            let dm = landmarks[i][c] - landmarks[j][c];
            let r = (keypoints[i][c] - keypoints[j][c]) - scale * dm;
            out.value += r.abs();
            let g = sign0(r);
            out.grad_keypoints[i][c] += g;
            out.grad_keypoints[j][c] -= g;
            out.grad_landmarks[i][c] -= g * scale;
            out.grad_landmarks[j][c] += g * scale;
            out.grad_scale -= g * dm;
        }
    }
    Ok(out)
}

/// `|| V (.) (I - I_Re) ||_{1,1}` and its gradient on the pre-clamp render.
///
/// With `normalize`, the sum is divided by the number of masked pixels.
pub fn photometric_loss(input: &Image, render: &RenderOutput, normalize: bool) -> Result<(f64, Vec<f64>)> {
    if input.width != render.width || input.height != render.height {
        return Err(Error::Param(format!(
            "image is {}x{}, render is {}x{}",
            input.width, input.height, render.width, render.height
        )));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; render.linear.len()];
    for (p, &m) in render.mask.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..3 {
            let i = p * 3 + c;
            let d = input.data[i] - render.linear[i];
            value += d.abs();
            grad[i] = -sign0(d);
        }
    }
    if normalize {
        let count = render.mask_count();
        if count > 0 {
            let inv = 1.0 / count as f64;
            value *= inv;
            grad.iter_mut().for_each(|g| *g *= inv);
        }
    }
    Ok((value, grad))
}

/// `|| eps_input - eps_render ||_2` and its gradient with respect to `eps_render`.
pub fn emotion_consistency_loss(eps_input: &[f64], eps_render: &[f64]) -> Result<(f64, Vec<f64>)> {
    if eps_input.len() != eps_render.len() {
        return Err(Error::Param(format!(
            "feature lengths differ: {} vs {}",
            eps_input.len(),
            eps_render.len()
        )));
    }
    let diff: Vec<f64> = eps_render.iter().zip(eps_input).map(|(r, i)| r - i).collect();
    let d = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    let grad = if d > 0.0 { diff.iter().map(|x| x / d).collect() } else { vec![0.0; diff.len()] };
    Ok((d, grad))
}

/// `||psi||^2` and `2 psi`.
pub fn expression_regularizer(psi: &[f64]) -> (f64, Vec<f64>) {
    (psi.iter().map(|x| x * x).sum(), psi.iter().map(|x| 2.0 * x).collect())
}

/// Gradient with respect to every entry of [`FaceParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub lighting: Vec<f64>,
    pub camera: [f64; 3],
}

impl ParamGrads {
    pub fn zeros(model: &FaceModel) -> Self {
        ParamGrads {
            beta: vec![0.0; model.n_beta],
            theta: vec![0.0; model.theta_len()],
            psi: vec![0.0; model.n_psi],
            alpha: vec![0.0; model.n_alpha],
            lighting: vec![0.0; renderer::LIGHTING_LEN],
            camera: [0.0; 3],
        }
    }

    pub fn is_zero(&self) -> bool {
        [&self.beta[..], &self.theta, &self.psi, &self.alpha, &self.lighting, &self.camera]
            .iter()
            .all(|v| v.iter().all(|&x| x == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub emo: f64,
    pub pho: f64,
    pub eye: f64,
    pub mc: f64,
    pub lc: f64,
    pub psi: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 6] {
        [self.emo, self.pho, self.eye, self.mc, self.lc, self.psi]
    }
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub terms: LossTerms,
    pub weights: LossWeights,
    pub total: f64,
    pub grad: ParamGrads,
    /// The render `I_Re` the terms were computed on.
    pub render: RenderOutput,
    pub render_feature: Vec<f64>,
}

impl LossReport {
    /// `total == sum(weight * term)` within `tol`.
    pub fn check_invariant(&self, tol: f64) -> bool {
        let sum: f64 = self.weights.as_array().iter().zip(self.terms.as_array()).map(|(w, t)| w * t).sum();
        (sum - self.total).abs() <= tol && self.terms.as_array().iter().all(|&t| t >= 0.0)
    }
}

/// The observation a render is compared against.
#[derive(Debug, Clone)]
pub struct LossTarget<'a> {
    pub image: &'a Image,
    /// 2D keypoints in camera-plane coordinates, one per model landmark.
    pub keypoints: &'a [[f64; 2]],
    /// Precomputed emotion feature of `image`; extracted on demand when absent.
    pub feature: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossOptions {
    pub normalize_photometric: bool,
    pub exec: Exec,
}

/// Render `params`, compare against `target`, and chain every gradient back
/// to the parameters.
pub fn total_loss(
    model: &FaceModel,
    params: &FaceParams,
    target: &LossTarget<'_>,
    extractor: &FeatureExtractor,
    weights: &LossWeights,
    options: &LossOptions,
) -> Result<LossReport> {
    weights.validate()?;
    ensure_finite("target image", &target.image.data)?;
    let posed = model.pose(params)?;
    let albedo = model.evaluate_albedo(&params.alpha)?;
    let camera = Camera::new(params.camera, target.image.width, target.image.height)?;
    let raster = RasterOptions { skin_triangles: model.skin_triangles.clone(), exec: options.exec };
    let render = renderer::rasterize(&posed.mesh, &camera, &albedo.colors, &params.lighting, &raster)?;

    let mut terms = LossTerms::default();
    let mut upstream = vec![0.0; render.linear.len()];

    let (pho, pho_grad) = photometric_loss(target.image, &render, options.normalize_photometric)?;
    terms.pho = pho;
    if weights.lambda_pho != 0.0 {
        upstream.iter_mut().zip(&pho_grad).for_each(|(u, g)| *u += weights.lambda_pho * g);
    }

    let input_feature = match target.feature {
        Some(f) => f.to_vec(),
        None => extractor.extract(target.image)?,
    };
    let trace = extractor.forward(&render.linear_image())?;
    let render_feature = trace.output().to_vec();
    let (emo, emo_grad) = emotion_consistency_loss(&input_feature, &render_feature)?;
    terms.emo = emo;
    if weights.lambda_emo != 0.0 && emo > 0.0 {
        let scaled: Vec<f64> = emo_grad.iter().map(|g| weights.lambda_emo * g).collect();
        let img_grad = extractor.backward(&trace, &scaled)?;
        upstream.iter_mut().zip(&img_grad).for_each(|(u, g)| *u += g);
    }

    let mut grad = ParamGrads::zeros(model);
    let mut grad_vertices = if upstream.iter().any(|&u| u != 0.0) {
        let rg = renderer::render_gradients(&posed.mesh, &camera, &albedo.colors, &params.lighting, &render, &upstream)?;
        grad.alpha = model.albedo_vjp(&albedo, &rg.albedo);
        grad.lighting = rg.lighting;
        grad.camera = [rg.scale, rg.translation[0], rg.translation[1]];
        rg.vertices
    } else {
        vec![[0.0; 3]; model.n_vertices()]
    };

    let landmarks = model.surface_landmarks(&posed.mesh);
    let mut grad_landmarks = vec![[0.0; 3]; landmarks.len()];
    for (role, lambda) in [
        (PairRole::EyeClosure, weights.lambda_eye),
        (PairRole::MouthClosure, weights.lambda_mc),
        (PairRole::LipCorner, weights.lambda_lc),
    ] {
        let value = match model.pair_set(role) {
            Some(set) => {
                let kl = relative_keypoint_loss(target.keypoints, &landmarks, params.camera[0], set)?;
                if lambda != 0.0 {
                    for (g, d) in grad_landmarks.iter_mut().zip(&kl.grad_landmarks) {
                        for c in 0..3 {
                            g[c] += lambda * d[c];
                        }
                    }
                    grad.camera[0] += lambda * kl.grad_scale;
                }
                kl.value
            }
            None => 0.0,
        };
        match role {
            PairRole::EyeClosure => terms.eye = value,
            PairRole::MouthClosure => terms.mc = value,
            _ => terms.lc = value,
        }
    }
    model.landmarks_vjp(&grad_landmarks, &mut grad_vertices);

    let geo = model.geometry_vjp(&posed, &grad_vertices);
    grad.beta = geo.beta;
    grad.theta = geo.theta;
    grad.psi = geo.psi;

    let (reg, reg_grad) = expression_regularizer(&params.psi);
    terms.psi = reg;
    grad.psi.iter_mut().zip(&reg_grad).for_each(|(g, r)| *g += weights.lambda_psi * r);

    let total = weights.as_array().iter().zip(terms.as_array()).map(|(w, t)| w * t).sum();
    Ok(LossReport { terms, weights: *weights, total, grad, render, render_feature })
}
