//! One-sweep check of every analytic gradient against central differences.
//!
//! Each site builds seeded random instances, draws a random scalar
//! projection of its output and compares the analytic directional
//! derivative with `(f(x + h u) - f(x - h u)) / 2h` along random unit
//! directions. Render-dependent sites skip probes that change any pixel's
//! triangle assignment.

use ndarray::Array2;
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::emotion_feature::{recognition_loss, AffectLabel, EmotionPrediction, FeatureExtractor, N_EXPRESSIONS};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::face_model::{make_toy_model, vertex_normals, vertex_normals_vjp, FaceModel, FaceParams, ToyModelConfig};
use crate::fitter::{retarget_objective, RetargetProblem, FRAMING_SCALE};
use crate::linalg::Vec3;
use crate::losses::{total_loss, LossOptions, LossTarget, LossWeights, ParamGrads};
use crate::param_recognizer::{batch_loss, grad_blocks, param_blocks, Mlp, MlpConfig};
use crate::renderer::{self, render_gradients, Camera, Image, RasterOptions, RenderOutput};
use crate::rng::substream;

const SMOOTH_TOL: f64 = 1e-4;
const RENDER_TOL: f64 = 1e-3;
const IMAGE_SIDE: usize = 32;

/// Registered gradient sites and their default tolerances.
pub const SITES: &[(&str, f64)] = &[
    ("mesh.geometry", SMOOTH_TOL),
    ("mesh.normals", SMOOTH_TOL),
    ("mesh.albedo", SMOOTH_TOL),
    ("mesh.landmarks", SMOOTH_TOL),
    ("render.lighting", SMOOTH_TOL),
    ("render.albedo", SMOOTH_TOL),
    ("render.vertices", RENDER_TOL),
    ("render.camera", RENDER_TOL),
    ("loss.emotion", RENDER_TOL),
    ("loss.photometric", RENDER_TOL),
    ("loss.eye_closure", SMOOTH_TOL),
    ("loss.mouth_closure", SMOOTH_TOL),
    ("loss.lip_corner", SMOOTH_TOL),
    ("loss.expression_reg", SMOOTH_TOL),
    ("extractor.input", SMOOTH_TOL),
    ("recognizer.loss", SMOOTH_TOL),
    ("recognizer.mlp", SMOOTH_TOL),
    ("retarget.objective", RENDER_TOL),
];

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances_per_site: usize,
    pub probes_per_instance: usize,
    pub step: f64,
    /// Overrides every site's default tolerance.
    pub tolerance: Option<f64>,
    pub exec: Exec,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { seed: 7, instances_per_site: 8, probes_per_instance: 3, step: 1e-6, tolerance: None, exec: Exec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteReport {
    pub site: String,
    pub instances: usize,
    pub probes: usize,
    /// Probes skipped because the step changed the pixel assignment.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub sites: Vec<SiteReport>,
    pub passed: bool,
}

/// A differentiable scalar function of a flat vector at one instance.
struct Instance {
    x: Vec<f64>,
    /// Value and gradient.
    eval: Box<dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Send + Sync>,
    /// Value only; defaults to `eval`.
    value: Option<Box<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>>,
    /// Pixel assignment signature; probes that change it are skipped.
    signature: Option<Box<dyn Fn(&[f64]) -> Result<Vec<Option<usize>>> + Send + Sync>>,
}

impl Instance {
    fn new(x: Vec<f64>, eval: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Send + Sync + 'static) -> Self {
        Instance { x, eval: Box::new(eval), value: None, signature: None }
    }

    fn with_signature(mut self, sig: impl Fn(&[f64]) -> Result<Vec<Option<usize>>> + Send + Sync + 'static) -> Self {
        self.signature = Some(Box::new(sig));
        self
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        match &self.value {
            Some(f) => f(x),
            None => Ok((self.eval)(x)?.0),
        }
    }
}

fn rel_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8)
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    d.iter().map(|v| v / norm).collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn unflatten(x: &[f64]) -> Vec<Vec3> {
    x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Probe one instance; returns (max error, probes used, probes skipped).
fn probe(inst: &Instance, rng: &mut ChaCha8Rng, probes: usize, h: f64) -> Result<(f64, usize, usize)> {
    let (_, grad) = (inst.eval)(&inst.x)?;
    let base_sig = match &inst.signature {
        Some(s) => Some(s(&inst.x)?),
        None => None,
    };
    let (mut worst, mut used, mut skipped) = (0.0f64, 0, 0);
    // extra attempts make up for probes that cross an assignment change
    for _ in 0..probes * 8 {
        if used == probes {
            break;
        }
        let u = unit_direction(rng, inst.x.len());
        let plus: Vec<f64> = inst.x.iter().zip(&u).map(|(x, d)| x + h * d).collect();
        let minus: Vec<f64> = inst.x.iter().zip(&u).map(|(x, d)| x - h * d).collect();
        if let (Some(sig), Some(base)) = (&inst.signature, &base_sig) {
            if &sig(&plus)? != base || &sig(&minus)? != base {
                skipped += 1;
                continue;
            }
        }
        let fd = (inst.value(&plus)? - inst.value(&minus)?) / (2.0 * h);
        worst = worst.max(rel_error(fd, dot(&grad, &u)));
        used += 1;
    }
    Ok((worst, used, skipped))
}

struct Fixture {
    model: FaceModel,
    extractor: FeatureExtractor,
}

fn fixture() -> Result<Fixture> {
    let model = make_toy_model(&ToyModelConfig { n_vertices: 144, ..Default::default() })?;
    Ok(Fixture { model, extractor: FeatureExtractor::reference(1) })
}

fn random_params(model: &FaceModel, rng: &mut ChaCha8Rng) -> FaceParams {
    let mut p = model.zero_params();
    p.beta = uniform(rng, model.n_beta, 0.5);
    p.psi = uniform(rng, model.n_psi, 1.0);
    p.alpha = uniform(rng, model.n_alpha, 0.3);
    p.theta = uniform(rng, model.theta_len(), 0.15);
    p.lighting[3..].iter_mut().for_each(|l| *l = 0.3 * rng.random_range(-1.0..1.0));
    p.camera = [FRAMING_SCALE + 0.05 * rng.random_range(-1.0..1.0), 0.02 * rng.random_range(-1.0..1.0), 0.02 * rng.random_range(-1.0..1.0)];
    p
}

fn raster(model: &FaceModel, p: &FaceParams) -> Result<(crate::face_model::Mesh, Vec<Vec3>, Camera, RenderOutput)> {
    let mesh = model.evaluate_mesh(p)?;
    let albedo = model.evaluate_albedo(&p.alpha)?.colors;
    let camera = Camera::new(p.camera, IMAGE_SIDE, IMAGE_SIDE)?;
    let opts = RasterOptions { skin_triangles: model.skin_triangles.clone(), exec: Exec::Sequential };
    let render = renderer::rasterize(&mesh, &camera, &albedo, &p.lighting, &opts)?;
    Ok((mesh, albedo, camera, render))
}

fn assignment(mesh: &crate::face_model::Mesh, camera: &Camera) -> Result<Vec<Option<usize>>> {
    Ok(renderer::visibility(mesh, camera, Exec::Sequential)?.iter().map(|a| a.map(|a| a.triangle)).collect())
}

/// Parameters flattened as `beta, theta, psi, alpha, lighting, camera`.
fn params_to_vec(p: &FaceParams) -> Vec<f64> {
    [&p.beta[..], &p.theta, &p.psi, &p.alpha, &p.lighting, &p.camera].concat()
}

fn vec_to_params(template: &FaceParams, x: &[f64]) -> FaceParams {
    let mut p = template.clone();
    let mut at = 0;
    for block in [&mut p.beta, &mut p.theta, &mut p.psi, &mut p.alpha, &mut p.lighting] {
        let n = block.len();
        block.copy_from_slice(&x[at..at + n]);
        at += n;
    }
    p.camera.copy_from_slice(&x[at..at + 3]);
    p
}

fn grads_to_vec(g: &ParamGrads) -> Vec<f64> {
    [&g.beta[..], &g.theta, &g.psi, &g.alpha, &g.lighting, &g.camera].concat()
}

fn build(site: &str, fx: &std::sync::Arc<Fixture>, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let model = &fx.model;
    let params = random_params(model, rng);
    let n_v = model.n_vertices();
    Ok(match site {
        "mesh.geometry" => {
            let u = uniform(rng, 3 * n_v, 1.0);
            let (nb, nt) = (model.n_beta, model.theta_len());
            let f = fx.clone();
            let x = [&params.beta[..], &params.theta, &params.psi].concat();
            Instance::new(x, move |x| {
                let mut p = f.model.zero_params();
                p.beta = x[..nb].to_vec();
                p.theta = x[nb..nb + nt].to_vec();
                p.psi = x[nb + nt..].to_vec();
                let posed = f.model.pose(&p)?;
                let v = dot(&flatten(&posed.mesh.vertices), &u);
                let g = f.model.geometry_vjp(&posed, &unflatten(&u));
                Ok((v, [g.beta, g.theta, g.psi].concat()))
            })
        }
        "mesh.normals" => {
            let u = uniform(rng, 3 * n_v, 1.0);
            let faces = model.faces.clone();
            let x = flatten(&model.evaluate_mesh(&params)?.vertices);
            Instance::new(x, move |x| {
                let verts = unflatten(x);
                let v = dot(&flatten(&vertex_normals(&verts, &faces)), &u);
                let mut g = vec![[0.0; 3]; verts.len()];
                vertex_normals_vjp(&verts, &faces, &unflatten(&u), &mut g);
                Ok((v, flatten(&g)))
            })
        }
        "mesh.albedo" => {
            let u = uniform(rng, 3 * n_v, 1.0);
            let f = fx.clone();
            Instance::new(params.alpha.clone(), move |x| {
                let a = f.model.evaluate_albedo(x)?;
                Ok((dot(&flatten(&a.colors), &u), f.model.albedo_vjp(&a, &unflatten(&u))))
            })
        }
        "mesh.landmarks" => {
            let u = uniform(rng, 3 * model.landmarks.len(), 1.0);
            let f = fx.clone();
            let mesh = model.evaluate_mesh(&params)?;
            Instance::new(flatten(&mesh.vertices), move |x| {
                let mut m = mesh.clone();
                m.vertices = unflatten(x);
                let v = dot(&flatten(&f.model.surface_landmarks(&m)), &u);
                let mut g = vec![[0.0; 3]; m.vertices.len()];
                f.model.landmarks_vjp(&unflatten(&u), &mut g);
                Ok((v, flatten(&g)))
            })
        }
        "render.lighting" | "render.albedo" | "render.vertices" | "render.camera" => {
            let (mesh, albedo, camera, _) = raster(model, &params)?;
            let u = uniform(rng, IMAGE_SIDE * IMAGE_SIDE * 3, 1.0);
            let faces = mesh.faces.clone();
            let skin = model.skin_triangles.clone();
            let lighting = params.lighting.clone();
            let render_at = move |verts: &[Vec3], albedo: &[Vec3], lighting: &[f64], cam: &Camera| -> Result<(RenderOutput, crate::face_model::Mesh)> {
                let mesh = crate::face_model::Mesh { vertices: verts.to_vec(), faces: faces.clone(), vertex_normals: vertex_normals(verts, &faces) };
                let opts = RasterOptions { skin_triangles: skin.clone(), exec: Exec::Sequential };
                Ok((renderer::rasterize(&mesh, cam, albedo, lighting, &opts)?, mesh))
            };
            let verts = mesh.vertices.clone();
            let site = site.to_string();
            let x = match site.as_str() {
                "render.lighting" => lighting.clone(),
                "render.albedo" => flatten(&albedo),
                "render.vertices" => flatten(&verts),
                _ => vec![camera.scale, camera.translation[0], camera.translation[1]],
            };
            let unpack = {
                let site = site.clone();
                move |x: &[f64]| -> Result<(Vec<Vec3>, Vec<Vec3>, Vec<f64>, Camera)> {
                    Ok(match site.as_str() {
                        "render.lighting" => (verts.clone(), albedo.clone(), x.to_vec(), camera.clone()),
                        "render.albedo" => (verts.clone(), unflatten(x), lighting.clone(), camera.clone()),
                        "render.vertices" => (unflatten(x), albedo.clone(), lighting.clone(), camera.clone()),
                        _ => (verts.clone(), albedo.clone(), lighting.clone(), Camera::new([x[0], x[1], x[2]], IMAGE_SIDE, IMAGE_SIDE)?),
                    })
                }
            };
            let unpack = std::sync::Arc::new(unpack);
            let render_at = std::sync::Arc::new(render_at);
            let (ua, ra) = (unpack.clone(), render_at.clone());
            let eval = move |x: &[f64]| -> Result<(f64, Vec<f64>)> {
                let (v, a, l, c) = ua(x)?;
                let (r, mesh) = ra(&v, &a, &l, &c)?;
                let g = render_gradients(&mesh, &c, &a, &l, &r, &u)?;
                let grad = match site.as_str() {
                    "render.lighting" => g.lighting,
                    "render.albedo" => flatten(&g.albedo),
                    "render.vertices" => flatten(&g.vertices),
                    _ => vec![g.scale, g.translation[0], g.translation[1]],
                };
                Ok((dot(&r.linear, &u), grad))
            };
            Instance::new(x, eval).with_signature(move |x| {
                let (v, a, l, c) = unpack(x)?;
                let (_, mesh) = render_at(&v, &a, &l, &c)?;
                assignment(&mesh, &c)
            })
        }
        "loss.emotion" | "loss.photometric" | "loss.eye_closure" | "loss.mouth_closure" | "loss.lip_corner" | "loss.expression_reg" => {
            let mut weights = LossWeights::zero();
            match site {
                "loss.emotion" => weights.lambda_emo = 1.0,
                "loss.photometric" => weights.lambda_pho = 1.0,
                "loss.eye_closure" => weights.lambda_eye = 1.0,
                "loss.mouth_closure" => weights.lambda_mc = 1.0,
                "loss.lip_corner" => weights.lambda_lc = 1.0,
                _ => weights.lambda_psi = 1.0,
            }
            // target: a render of different parameters, so every term is active
            let other = random_params(model, rng);
            let (target_mesh, _, target_cam, target_render) = raster(model, &other)?;
            let image = target_render.linear_image();
            let keypoints = renderer::project(&target_cam, &model.surface_landmarks(&target_mesh));
            let feature = fx.extractor.extract(&image)?;
            let f = fx.clone();
            let template = params.clone();
            let eval = {
                let template = template.clone();
                move |x: &[f64]| -> Result<(f64, Vec<f64>)> {
                    let p = vec_to_params(&template, x);
                    let target = LossTarget { image: &image, keypoints: &keypoints, feature: Some(&feature) };
                    let opts = LossOptions { normalize_photometric: false, exec: Exec::Sequential };
                    let r = total_loss(&f.model, &p, &target, &f.extractor, &weights, &opts)?;
                    Ok((r.total, grads_to_vec(&r.grad)))
                }
            };
            let f = fx.clone();
            Instance::new(params_to_vec(&params), eval).with_signature(move |x| {
                let p = vec_to_params(&template, x);
                let mesh = f.model.evaluate_mesh(&p)?;
                assignment(&mesh, &Camera::new(p.camera, IMAGE_SIDE, IMAGE_SIDE)?)
            })
        }
        "extractor.input" => {
            let u = uniform(rng, fx.extractor.feature_dim(), 1.0);
            let img: Vec<f64> = (0..64 * 64 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            let f = fx.clone();
            Instance::new(img, move |x| {
                let image = Image { width: 64, height: 64, data: x.to_vec() };
                let (feat, g) = f.extractor.extract_with_input_grad(&image, &u)?;
                Ok((dot(&feat, &u), g))
            })
        }
        "recognizer.loss" => {
            let n = 6;
            let labels: Vec<AffectLabel> = (0..n)
                .map(|_| AffectLabel { valence: rng.random_range(-1.0..1.0), arousal: rng.random_range(-1.0..1.0), class: rng.random_range(0..N_EXPRESSIONS) })
                .collect();
            let mix = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let width = 2 + N_EXPRESSIONS;
            let x = uniform(rng, n * width, 1.0);
            Instance::new(x, move |x| {
                let preds: Vec<EmotionPrediction> = x
                    .chunks_exact(width)
                    .map(|c| EmotionPrediction { valence: c[0], arousal: c[1], logits: c[2..].to_vec() })
                    .collect();
                let l = recognition_loss(&preds, &labels, mix.0, mix.1, mix.2)?;
                let g = l.grads.iter().flat_map(|g| [vec![g.valence, g.arousal], g.logits.clone()].concat()).collect();
                Ok((l.total, g))
            })
        }
        "recognizer.mlp" => {
            let (dim, batch) = (6, 8);
            let mut config = MlpConfig::new(dim, 3);
            config.hidden = 5;
            let mut mlp = Mlp::new(config, rng.random())?;
            // nonzero biases and affine terms so every block matters
            for b in param_blocks(&mut mlp) {
                b.iter_mut().for_each(|v| *v += 0.1 * rng.random_range(-1.0..1.0));
            }
            let input = Array2::from_shape_fn((batch, dim), |_| rng.random_range(-1.0..1.0));
            let labels: Vec<AffectLabel> = (0..batch)
                .map(|_| AffectLabel { valence: rng.random_range(-1.0..1.0), arousal: rng.random_range(-1.0..1.0), class: rng.random_range(0..3) })
                .collect();
            let mix = (rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
            let x: Vec<f64> = param_blocks(&mut mlp.clone()).iter().flat_map(|b| b.to_vec()).collect();
            Instance::new(x, move |x| {
                let mut m = mlp.clone();
                let mut at = 0;
                for b in param_blocks(&mut m) {
                    let n = b.len();
                    b.copy_from_slice(&x[at..at + n]);
                    at += n;
                }
                let (loss, g) = batch_loss(&m, &input, &labels, mix)?;
                Ok((loss, grad_blocks(&g).concat()))
            })
        }
        "retarget.objective" => {
            let target = random_params(model, rng);
            let (_, _, _, r) = raster(model, &target)?;
            let mut problem = RetargetProblem::new(params.clone(), target, fx.extractor.extract(&r.linear_image())?);
            problem.image_size = (IMAGE_SIDE, IMAGE_SIDE);
            problem.lambda_psi = 1e-3;
            let f = fx.clone();
            let p2 = problem.clone();
            let f2 = fx.clone();
            Instance::new(params.psi.clone(), move |x| retarget_objective(&f.model, &f.extractor, &problem, x)).with_signature(
                move |x| {
                    let p = p2.compose(x, None, &f2.model);
                    let mesh = f2.model.evaluate_mesh(&p)?;
                    assignment(&mesh, &Camera::new(p.camera, IMAGE_SIDE, IMAGE_SIDE)?)
                },
            )
        }
        other => return Err(Error::Param(format!("unknown gradient site {other:?}"))),
    })
}

pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.instances_per_site == 0 || config.probes_per_instance == 0 {
        return Err(Error::Param("instances and probes per site must be positive".into()));
    }
    if !(config.step > 0.0 && config.step.is_finite()) {
        return Err(Error::Param("finite-difference step must be positive".into()));
    }
    if let Some(t) = config.tolerance {
        if !(t >= 0.0) {
            return Err(Error::Param("tolerance must be >= 0".into()));
        }
    }
    let fx = std::sync::Arc::new(fixture()?);
    let n = config.instances_per_site;
    let jobs: Vec<(usize, usize)> = (0..SITES.len()).flat_map(|s| (0..n).map(move |i| (s, i))).collect();
    let results = config.exec.map(jobs.len(), |j| {
        let (s, i) = jobs[j];
        let mut rng = substream(config.seed, &format!("gradcheck/{}/{i}", SITES[s].0));
        let inst = build(SITES[s].0, &fx, &mut rng)?;
        probe(&inst, &mut rng, config.probes_per_instance, config.step)
    });
    let mut sites = Vec::new();
    for (s, &(name, default_tol)) in SITES.iter().enumerate() {
        let (mut worst, mut probes, mut skipped) = (0.0f64, 0, 0);
        for r in &results[s * n..(s + 1) * n] {
            let (w, used, skip) = r.as_ref().map_err(|e| Error::Numeric(format!("gradient site {name}: {e}")))?;
            worst = worst.max(*w);
            probes += used;
            skipped += skip;
        }
        let tolerance = config.tolerance.unwrap_or(default_tol);
        let passed = probes > 0 && worst < tolerance;
        sites.push(SiteReport { site: name.to_string(), instances: n, probes, skipped, max_rel_error: worst, tolerance, passed });
    }
    let passed = sites.iter().all(|s| s.passed);
    Ok(GradcheckReport { seed: config.seed, sites, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_sites_pass_at_default_tolerances() {
        let report = run_gradcheck(&GradcheckConfig { instances_per_site: 2, ..Default::default() }).unwrap();
        assert!(report.passed);
        assert_eq!(report.sites.len(), SITES.len());
    }

    #[test]
    fn zero_tolerance_fails() {
        let config = GradcheckConfig { instances_per_site: 1, tolerance: Some(0.0), ..Default::default() };
        assert!(!run_gradcheck(&config).unwrap().passed);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(run_gradcheck(&GradcheckConfig { step: 0.0, ..Default::default() }).is_err());
        assert!(run_gradcheck(&GradcheckConfig { instances_per_site: 0, ..Default::default() }).is_err());
        assert!(run_gradcheck(&GradcheckConfig { tolerance: Some(f64::NAN), ..Default::default() }).is_err());
    }
}
