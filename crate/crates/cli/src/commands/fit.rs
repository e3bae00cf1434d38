use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use facecap_core::emotion_feature::FeatureExtractor;
use facecap_core::face_model::FaceModel;
use facecap_core::fitter::{retarget_expression, RetargetProblem, RetargetResult, Termination};
use facecap_core::renderer::{load_image, write_png};
use facecap_core::rng::substream;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::scene::{random_params, render_scene, write_mesh};
use crate::config::{create_dir, pick, read_params, write_json, CommonArgs, ModelArgs, RunConfig, SizeArgs};

#[derive(Debug, Args, Clone, Default)]
pub struct OptimizerArgs {
    #[arg(long)]
    lambda_psi: Option<f64>,
    /// Initial line-search step, or the step of fixed-step descent.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Plain fixed-step gradient descent instead of the line search.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    fixed_step: Option<bool>,
    /// Optimize the jaw rotation together with the expression (experimental).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    optimize_jaw: Option<bool>,
    /// Standard deviation of seeded Gaussian noise added to the initial expression.
    #[arg(long)]
    init_noise: Option<f64>,
}

impl OptimizerArgs {
    fn apply(&self, config: &RunConfig, problem: &mut RetargetProblem, seed: u64) -> Result<()> {
        problem.lambda_psi = pick(self.lambda_psi, config.lambda_psi, problem.lambda_psi);
        problem.step = pick(self.step, config.step, problem.step);
        problem.max_iters = pick(self.max_iters, config.max_iters, problem.max_iters);
        problem.fixed_step = pick(self.fixed_step, config.fixed_step, false);
        problem.optimize_jaw = pick(self.optimize_jaw, config.optimize_jaw, false);
        let noise = pick(self.init_noise, config.init_noise, 0.0);
        anyhow::ensure!(noise >= 0.0 && noise.is_finite(), "init noise must be >= 0");
        let mut rng = substream(seed, "retarget-init");
        for v in &mut problem.init_psi {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise * z;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct RetargetArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    size: SizeArgs,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    /// Supplies identity, albedo and the initial expression.
    #[arg(long)]
    source_params: PathBuf,
    /// Supplies pose, lighting and camera; rendered for the target feature
    /// unless an image or feature is given.
    #[arg(long)]
    target_params: PathBuf,
    #[arg(long, conflicts_with = "target_feature")]
    target_image: Option<PathBuf>,
    /// JSON array with the target emotion feature.
    #[arg(long)]
    target_feature: Option<PathBuf>,
    #[arg(long)]
    out_mesh: Option<PathBuf>,
    #[arg(long)]
    out_render: Option<PathBuf>,
    #[arg(long)]
    trace_csv: Option<PathBuf>,
    /// Fitted parameters as JSON.
    #[arg(long)]
    out_params: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct RetargetSummary {
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub termination: Termination,
    pub psi: Vec<f64>,
    pub jaw: [f64; 3],
    /// Wall-clock time, left out of the written summary so reruns are byte-identical.
    #[serde(skip)]
    pub seconds: f64,
}

fn summarize(res: &RetargetResult, seconds: f64) -> RetargetSummary {
    let rows = &res.trace.rows;
    RetargetSummary {
        iterations: rows.len() - 1,
        initial_objective: rows[0].objective,
        final_objective: rows[rows.len() - 1].objective,
        termination: res.trace.termination,
        psi: res.psi.clone(),
        jaw: res.jaw,
        seconds,
    }
}

fn write_trace(res: &RetargetResult, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    res.trace.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}

fn target_feature(
    a: &RetargetArgs,
    model: &FaceModel,
    extractor: &FeatureExtractor,
    size: (usize, usize),
) -> Result<Vec<f64>> {
    if let Some(path) = &a.target_feature {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return serde_json::from_str(&text).with_context(|| format!("parsing feature {}", path.display()));
    }
    if let Some(path) = &a.target_image {
        let image = load_image(path).with_context(|| format!("loading {}", path.display()))?;
        return Ok(extractor.extract(&image)?);
    }
    let target = read_params(&a.target_params, model)?;
    Ok(extractor.extract(&render_scene(model, &target, size)?.output.linear_image())?)
}

pub fn retarget(a: RetargetArgs) -> Result<()> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    let seed = pick(a.common.seed, config.seed, 0);
    let model = a.model.load_model(&config)?;
    let extractor = a.model.load_extractor(&config)?;
    let size = a.size.size(&config)?;
    let source = read_params(&a.source_params, &model)?;
    let target = read_params(&a.target_params, &model)?;
    let feature = target_feature(&a, &model, &extractor, size)?;
    let mut problem = RetargetProblem::new(source.clone(), target, feature);
    problem.init_psi = source.psi.clone();
    problem.image_size = size;
    a.optimizer.apply(&config, &mut problem, seed)?;
    problem.validate(&model, &extractor)?;

    let start = Instant::now();
    let res = retarget_expression(&model, &problem, &extractor)?;
    let summary = summarize(&res, start.elapsed().as_secs_f64());
    let r = render_scene(&model, &res.params, size)?;
    if let Some(path) = &a.out_mesh {
        write_mesh(&r.mesh, path)?;
    }
    if let Some(path) = &a.out_render {
        write_png(&r.output.to_image(), path)?;
    }
    if let Some(path) = &a.trace_csv {
        write_trace(&res, path)?;
    }
    if let Some(path) = &a.out_params {
        write_json(&res.params, path)?;
    }
    println!(
        "{} iterations, objective {:.6e} -> {:.6e} ({:?})",
        summary.iterations, summary.initial_objective, summary.final_objective, summary.termination
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    size: SizeArgs,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

pub fn demo(a: DemoArgs) -> Result<()> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    let Some(out) = a.out_dir.clone().or(config.out_dir.clone()) else {
        bail!("--out-dir is required");
    };
    let seed = pick(a.common.seed, config.seed, 1);
    let model = a.model.load_model(&config)?;
    let extractor = a.model.load_extractor(&config)?;
    let size = a.size.size(&config)?;

    // a mild source expression, a strong target one on a different identity
    let source = random_params(&model, seed, "demo-source", 0.3, 0.3);
    let target = random_params(&model, seed, "demo-target", 1.5, 0.3);
    let source_view = render_scene(&model, &source, size)?;
    let target_view = render_scene(&model, &target, size)?;
    let feature = extractor.extract(&target_view.output.linear_image())?;
    let mut problem = RetargetProblem::new(source.clone(), target.clone(), feature);
    problem.init_psi = source.psi.clone();
    problem.image_size = size;
    a.optimizer.apply(&config, &mut problem, seed)?;
    problem.validate(&model, &extractor)?;

    let start = Instant::now();
    let res = retarget_expression(&model, &problem, &extractor)?;
    let summary = summarize(&res, start.elapsed().as_secs_f64());
    if !(summary.final_objective < summary.initial_objective) {
        bail!("retargeting did not lower the objective ({} -> {})", summary.initial_objective, summary.final_objective);
    }
    let result_view = render_scene(&model, &res.params, size)?;

    create_dir(&out)?;
    for (name, view) in [("source", &source_view), ("target", &target_view), ("retargeted", &result_view)] {
        write_png(&view.output.to_image(), &out.join(format!("{name}.png")))?;
        write_mesh(&view.mesh, &out.join(format!("{name}.obj")))?;
    }
    write_json(&source, &out.join("source_params.json"))?;
    write_json(&target, &out.join("target_params.json"))?;
    write_json(&res.params, &out.join("retargeted_params.json"))?;
    write_trace(&res, &out.join("trace.csv"))?;
    write_json(&summary, &out.join("summary.json"))?;
    println!(
        "retargeted in {} iterations ({:.1}s): objective {:.6e} -> {:.6e}",
        summary.iterations, summary.seconds, summary.initial_objective, summary.final_objective
    );
    Ok(())
}
