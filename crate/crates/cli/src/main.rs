mod commands;
mod config;

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{check, fit, learn, scene, search};

#[derive(Debug, Parser)]
#[command(name = "facecap", version, about = "Emotion-driven face model fitting, rendering and recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the built-in toy face model as an FCM1 file.
    MakeModel(scene::MakeModelArgs),
    /// Draw random face parameters and write them as JSON.
    SampleParams(scene::SampleParamsArgs),
    /// Render parameters to a PNG, a face mask, and a landmark overlay.
    Render(scene::RenderArgs),
    /// Evaluate the total fitting loss of parameters against a target.
    Evaluate(scene::EvaluateArgs),
    /// Optimize expression coefficients to match a target's emotion feature.
    Retarget(fit::RetargetArgs),
    /// Train the image-to-expression encoder on rendered synthetic data.
    TrainEncoder(learn::TrainEncoderArgs),
    /// Train the parameter-based emotion recognizer.
    TrainMlp(learn::TrainMlpArgs),
    /// Affect metrics from a predictions CSV.
    Metrics(learn::MetricsArgs),
    /// Extract emotion features for a list of images into an index.
    Embed(search::EmbedArgs),
    /// Nearest neighbors in an emotion-feature index.
    Retrieve(search::RetrieveArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(check::GradcheckArgs),
    /// Source/target renders, a retargeting run and its trace.
    Demo(fit::DemoArgs),
}

fn init_threads() -> Result<()> {
    if let Ok(value) = std::env::var("FACECAP_THREADS") {
        let n: usize = value.trim().parse().with_context(|| format!("FACECAP_THREADS={value:?} is not a count"))?;
        anyhow::ensure!(n >= 1, "FACECAP_THREADS must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::MakeModel(a) => scene::make_model(a),
        Command::SampleParams(a) => scene::sample_params(a),
        Command::Render(a) => scene::render(a),
        Command::Evaluate(a) => scene::evaluate(a),
        Command::Retarget(a) => fit::retarget(a),
        Command::TrainEncoder(a) => learn::train_encoder(a),
        Command::TrainMlp(a) => learn::train_mlp(a),
        Command::Metrics(a) => learn::metrics(a),
        Command::Embed(a) => search::embed(a),
        Command::Retrieve(a) => search::retrieve(a),
        Command::Gradcheck(a) => return check::gradcheck(a),
        Command::Demo(a) => fit::demo(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
