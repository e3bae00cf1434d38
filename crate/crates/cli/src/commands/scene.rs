use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use facecap_core::face_model::{make_toy_model, write_model, write_obj, FaceModel, FaceParams, Mesh, ToyModelConfig};
use facecap_core::fitter::FRAMING_SCALE;
use facecap_core::losses::{total_loss, LossOptions, LossTarget, LossWeights};
use facecap_core::renderer::{self, load_image, write_mask_pgm, write_png, Camera, Image, RasterOptions, RenderOutput};
use facecap_core::rng::substream;
use facecap_core::Exec;
use rand::Rng as _;
use serde::Serialize;

use crate::config::{create_dir, pick, read_params, write_json, CommonArgs, ModelArgs, RunConfig, SizeArgs, WeightArgs};

/// Landmark marker color in overlays.
pub const MARKER: [f64; 3] = [1.0, 0.0, 1.0];

pub struct Rendered {
    pub mesh: Mesh,
    pub camera: Camera,
    pub output: RenderOutput,
    /// Landmarks in camera-plane coordinates.
    pub keypoints: Vec<[f64; 2]>,
}

pub fn render_scene(model: &FaceModel, params: &FaceParams, size: (usize, usize)) -> Result<Rendered> {
    let mesh = model.evaluate_mesh(params)?;
    let albedo = model.evaluate_albedo(&params.alpha)?;
    let camera = Camera::new(params.camera, size.0, size.1)?;
    let opts = RasterOptions { skin_triangles: model.skin_triangles.clone(), exec: Exec::default() };
    let output = renderer::rasterize(&mesh, &camera, &albedo.colors, &params.lighting, &opts)?;
    let keypoints = renderer::project(&camera, &model.surface_landmarks(&mesh));
    Ok(Rendered { mesh, camera, output, keypoints })
}

/// The clamped render with each landmark's pixel set to [`MARKER`].
pub fn landmark_overlay(r: &Rendered) -> Image {
    let mut img = r.output.to_image();
    for &k in &r.keypoints {
        let [x, y] = r.camera.plane_to_pixel(k);
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
            let p = (y as usize * img.width + x as usize) * 3;
            img.data[p..p + 3].copy_from_slice(&MARKER);
        }
    }
    img
}

pub fn write_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_obj(mesh, &mut w)?;
    Ok(())
}

/// Random but plausible parameters: small identity, pose and lighting
/// jitter, expression drawn from `[-psi_scale, psi_scale]`.
pub fn random_params(model: &FaceModel, seed: u64, stream: &str, psi_scale: f64, nuisance: f64) -> FaceParams {
    let mut rng = substream(seed, stream);
    let mut p = model.zero_params();
    p.beta.iter_mut().for_each(|x| *x = nuisance * rng.random_range(-1.0..1.0));
    p.alpha.iter_mut().for_each(|x| *x = nuisance * rng.random_range(-1.0..1.0));
    p.psi.iter_mut().for_each(|x| *x = psi_scale * rng.random_range(-1.0..1.0));
    p.lighting[3..].iter_mut().for_each(|x| *x = 0.3 * nuisance * rng.random_range(-1.0..1.0));
    p.camera = [FRAMING_SCALE, 0.0, 0.0];
    p
}

#[derive(Debug, Args)]
pub struct MakeModelArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_vertices: Option<usize>,
}

pub fn make_model(a: MakeModelArgs) -> Result<()> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    let toy = ToyModelConfig {
        seed: pick(a.common.seed, config.seed, 1),
        n_vertices: a.n_vertices.unwrap_or(ToyModelConfig::default().n_vertices),
        ..Default::default()
    };
    let model = make_toy_model(&toy)?;
    let mut w = BufWriter::new(std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    write_model(&model, &mut w)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct SampleParamsArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Expression coefficients are uniform in `[-psi-scale, psi-scale]`.
    #[arg(long, default_value_t = 1.0)]
    psi_scale: f64,
    /// Amplitude of identity, albedo and lighting variation.
    #[arg(long, default_value_t = 0.3)]
    nuisance: f64,
}

pub fn sample_params(a: SampleParamsArgs) -> Result<()> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    anyhow::ensure!(a.psi_scale >= 0.0 && a.nuisance >= 0.0, "scales must be >= 0");
    let model = a.model.load_model(&config)?;
    let p = random_params(&model, pick(a.common.seed, config.seed, 0), "sample-params", a.psi_scale, a.nuisance);
    write_json(&p, &a.out)
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    size: SizeArgs,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct LandmarkRow {
    index: usize,
    x: f64,
    y: f64,
}

pub fn render(a: RenderArgs) -> Result<()> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    let Some(out) = a.out_dir.or(config.out_dir.clone()) else {
        bail!("--out-dir is required");
    };
    let model = a.model.load_model(&config)?;
    let params = read_params(&a.params, &model)?;
    let r = render_scene(&model, &params, a.size.size(&config)?)?;

    create_dir(&out)?;
    write_png(&r.output.to_image(), &out.join("render.png"))?;
    write_mask_pgm(&r.output.mask, r.output.width, r.output.height, &out.join("mask.pgm"))?;
    write_png(&landmark_overlay(&r), &out.join("overlay.png"))?;
    write_mesh(&r.mesh, &out.join("mesh.obj"))?;
    let mut csv = csv::Writer::from_path(out.join("landmarks.csv"))?;
    for (index, &k) in r.keypoints.iter().enumerate() {
        let [x, y] = r.camera.plane_to_pixel(k);
        csv.serialize(LandmarkRow { index, x, y })?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[command(flatten)]
    size: SizeArgs,
    #[arg(long)]
    params: PathBuf,
    /// Render these parameters as the target image and keypoints.
    #[arg(long, conflicts_with = "target_image")]
    target_params: Option<PathBuf>,
    #[arg(long)]
    target_image: Option<PathBuf>,
    /// CSV `x,y` per landmark, camera-plane coordinates.
    #[arg(long, requires = "target_image")]
    target_keypoints: Option<PathBuf>,
    /// JSON report path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GradReport<'a> {
    beta: &'a [f64],
    theta: &'a [f64],
    psi: &'a [f64],
    alpha: &'a [f64],
    lighting: &'a [f64],
    camera: &'a [f64],
}

#[derive(Serialize)]
struct EvaluateReport<'a> {
    terms: facecap_core::losses::LossTerms,
    weights: LossWeights,
    total: f64,
    grad: GradReport<'a>,
}

#[derive(serde::Deserialize)]
struct KeypointRow {
    x: f64,
    y: f64,
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    let weights = a.weights.weights(&config, LossWeights::default())?;
    let model = a.model.load_model(&config)?;
    let extractor = a.model.load_extractor(&config)?;
    let params = read_params(&a.params, &model)?;
    let size = a.size.size(&config)?;
    let (image, keypoints) = match (&a.target_params, &a.target_image) {
        (Some(path), _) => {
            let r = render_scene(&model, &read_params(path, &model)?, size)?;
            (r.output.linear_image(), r.keypoints)
        }
        (None, Some(path)) => {
            let image = load_image(path).with_context(|| format!("loading {}", path.display()))?;
            anyhow::ensure!((image.width, image.height) == size, "target image is {}x{}, expected {}x{} (set --width/--height)", image.width, image.height, size.0, size.1);
            let keypoints = match &a.target_keypoints {
                Some(kp) => csv::Reader::from_path(kp)?
                    .deserialize()
                    .map(|r| r.map(|k: KeypointRow| [k.x, k.y]))
                    .collect::<std::result::Result<Vec<_>, _>>()?,
                None => {
                    anyhow::ensure!(
                        weights.lambda_eye == 0.0 && weights.lambda_mc == 0.0 && weights.lambda_lc == 0.0,
                        "keypoint terms need --target-keypoints"
                    );
                    vec![[0.0; 2]; model.landmarks.len()]
                }
            };
            (image, keypoints)
        }
        (None, None) => bail!("give --target-params or --target-image"),
    };
    let target = LossTarget { image: &image, keypoints: &keypoints, feature: None };
    let opts = LossOptions { normalize_photometric: a.weights.normalize(&config), exec: Exec::default() };
    let r = total_loss(&model, &params, &target, &extractor, &weights, &opts)?;
    let g = &r.grad;
    let report = EvaluateReport {
        terms: r.terms,
        weights,
        total: r.total,
        grad: GradReport { beta: &g.beta, theta: &g.theta, psi: &g.psi, alpha: &g.alpha, lighting: &g.lighting, camera: &g.camera },
    };
    match &a.out {
        Some(path) => write_json(&report, path),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}
