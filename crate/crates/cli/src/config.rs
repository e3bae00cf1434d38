//! TOML run configuration. Keys are the long flag names with `_` in place
//! of `-`; a flag given on the command line wins over the file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use facecap_core::emotion_feature::{read_extractor, FeatureExtractor};
use facecap_core::face_model::{make_toy_model, read_model, FaceModel, FaceParams, ToyModelConfig};
use facecap_core::losses::LossWeights;
use serde::Deserialize;

/// Seed of the built-in reference feature extractor.
pub const REFERENCE_EXTRACTOR_SEED: u64 = 1;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: Option<PathBuf>,
    pub extractor: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub lambda_emo: Option<f64>,
    pub lambda_pho: Option<f64>,
    pub lambda_eye: Option<f64>,
    pub lambda_mc: Option<f64>,
    pub lambda_lc: Option<f64>,
    pub lambda_psi: Option<f64>,
    pub normalize_photometric: Option<bool>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub hidden: Option<usize>,
    pub grid: Option<usize>,
    pub patience: Option<usize>,
    pub n_samples: Option<usize>,
    pub step: Option<f64>,
    pub max_iters: Option<usize>,
    pub fixed_step: Option<bool>,
    pub optimize_jaw: Option<bool>,
    pub init_noise: Option<f64>,
    pub k: Option<usize>,
    pub max_per_group: Option<usize>,
    pub tolerance: Option<f64>,
    pub instances: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag, then config value, then default.
pub fn pick<T>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    /// FCM1 model file; the built-in toy model when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// EMF1 feature extractor weights; the built-in reference network when absent.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
}

impl ModelArgs {
    pub fn load_model(&self, config: &RunConfig) -> Result<FaceModel> {
        match self.model.as_ref().or(config.model.as_ref()) {
            Some(path) => {
                let mut file = std::io::BufReader::new(
                    std::fs::File::open(path).with_context(|| format!("opening model {}", path.display()))?,
                );
                read_model(&mut file).with_context(|| format!("reading model {}", path.display()))
            }
            None => Ok(make_toy_model(&ToyModelConfig::default())?),
        }
    }

    pub fn load_extractor(&self, config: &RunConfig) -> Result<FeatureExtractor> {
        match self.extractor.as_ref().or(config.extractor.as_ref()) {
            Some(path) => {
                let mut file = std::io::BufReader::new(
                    std::fs::File::open(path).with_context(|| format!("opening extractor {}", path.display()))?,
                );
                read_extractor(&mut file).with_context(|| format!("reading extractor {}", path.display()))
            }
            None => Ok(FeatureExtractor::reference(REFERENCE_EXTRACTOR_SEED)),
        }
    }
}

#[derive(Debug, Args, Clone, Default)]
pub struct WeightArgs {
    #[arg(long)]
    pub lambda_emo: Option<f64>,
    #[arg(long)]
    pub lambda_pho: Option<f64>,
    #[arg(long)]
    pub lambda_eye: Option<f64>,
    #[arg(long)]
    pub lambda_mc: Option<f64>,
    #[arg(long)]
    pub lambda_lc: Option<f64>,
    #[arg(long)]
    pub lambda_psi: Option<f64>,
    /// Divide the photometric term by the number of face pixels.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize_photometric: Option<bool>,
}

impl WeightArgs {
    pub fn weights(&self, config: &RunConfig, defaults: LossWeights) -> Result<LossWeights> {
        let w = LossWeights {
            lambda_emo: pick(self.lambda_emo, config.lambda_emo, defaults.lambda_emo),
            lambda_pho: pick(self.lambda_pho, config.lambda_pho, defaults.lambda_pho),
            lambda_eye: pick(self.lambda_eye, config.lambda_eye, defaults.lambda_eye),
            lambda_mc: pick(self.lambda_mc, config.lambda_mc, defaults.lambda_mc),
            lambda_lc: pick(self.lambda_lc, config.lambda_lc, defaults.lambda_lc),
            lambda_psi: pick(self.lambda_psi, config.lambda_psi, defaults.lambda_psi),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn normalize(&self, config: &RunConfig) -> bool {
        pick(self.normalize_photometric, config.normalize_photometric, false)
    }
}

#[derive(Debug, Args, Clone, Default)]
pub struct SizeArgs {
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

impl SizeArgs {
    pub fn size(&self, config: &RunConfig) -> Result<(usize, usize)> {
        let size = (pick(self.width, config.width, 64), pick(self.height, config.height, 64));
        anyhow::ensure!(size.0 > 0 && size.1 > 0, "image size must be positive");
        Ok(size)
    }
}

pub fn read_params(path: &Path, model: &FaceModel) -> Result<FaceParams> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading parameters {}", path.display()))?;
    let params: FaceParams =
        serde_json::from_str(&text).with_context(|| format!("parsing parameters {}", path.display()))?;
    model.check_params(&params).with_context(|| format!("parameters {}", path.display()))?;
    Ok(params)
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}
