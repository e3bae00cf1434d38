use rand::Rng as _;

use crate::emotion_feature::{AffectLabel, FeatureExtractor, N_EXPRESSIONS};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::face_model::{FaceModel, FaceParams};
use crate::renderer::{self, Camera, Image, RasterOptions};
use crate::rng::substream;

/// Camera scale at which the toy face fills the whole frame, so renders are
/// tight face crops with no background.
pub const FRAMING_SCALE: f64 = 1.35;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub image_size: (usize, usize),
    /// Expression coefficients are drawn uniformly from `[-psi_scale, psi_scale]`.
    pub psi_scale: f64,
    /// When set, `psi = a * direction` with a scalar `a` instead of a full draw.
    pub direction: Option<Vec<f64>>,
    /// Amplitude of the random identity, albedo, pose and lighting jitter.
    pub nuisance_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 64,
            seed: 0,
            image_size: (64, 64),
            psi_scale: 1.5,
            direction: None,
            nuisance_scale: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: Image,
    /// Ground-truth parameters the image was rendered from.
    pub params: FaceParams,
    /// Projected model landmarks, camera-plane coordinates.
    pub keypoints: Vec<[f64; 2]>,
    pub feature: Vec<f64>,
    /// Affect labels derived from the expression coefficients.
    pub label: AffectLabel,
}

/// Affect labels as a fixed function of `psi`: valence and arousal are
/// `tanh` of two projections, the class is the sector of the
/// `(valence, arousal)` angle (neutral near the origin).
pub fn synthetic_label(psi: &[f64]) -> AffectLabel {
    let proj = |phase: f64| -> f64 {
        psi.iter().enumerate().map(|(i, p)| p * (phase + i as f64 * 1.7).cos()).sum::<f64>() / (psi.len().max(1) as f64).sqrt()
    };
    let valence = proj(0.0).tanh();
    let arousal = proj(1.1).tanh();
    let r = valence.hypot(arousal);
    let class = if r < 0.15 {
        N_EXPRESSIONS - 1
    } else {
        let angle = arousal.atan2(valence) + std::f64::consts::PI;
        ((angle / (2.0 * std::f64::consts::PI) * 7.0) as usize).min(6)
    };
    AffectLabel { valence, arousal, class }
}

/// Render the model under random parameters. Images are the unclamped
/// shading, the same signal the losses compare against.
pub fn make_synthetic_dataset(
    model: &FaceModel,
    extractor: &FeatureExtractor,
    config: &SyntheticConfig,
    exec: Exec,
) -> Result<Vec<SyntheticSample>> {
    if config.image_size.0 == 0 || config.image_size.1 == 0 {
        return Err(Error::Param("image size must be positive".into()));
    }
    if let Some(d) = &config.direction {
        if d.len() != model.n_psi || d.iter().all(|&x| x == 0.0) {
            return Err(Error::Param("direction must be a nonzero vector of length n_psi".into()));
        }
    }
    // draw every parameter set up front so the result does not depend on scheduling
    let mut rng = substream(config.seed, "synthetic-dataset");
    let mut all_params = Vec::with_capacity(config.n_samples);
    for _ in 0..config.n_samples {
        let mut p = model.zero_params();
        let n = config.nuisance_scale;
        p.beta.iter_mut().for_each(|x| *x = n * rng.random_range(-1.0..1.0));
        p.alpha.iter_mut().for_each(|x| *x = n * rng.random_range(-1.0..1.0));
        match &config.direction {
            Some(d) => {
                let a = config.psi_scale * rng.random_range(-1.0..1.0);
                p.psi = d.iter().map(|x| a * x).collect();
            }
            None => p.psi.iter_mut().for_each(|x| *x = config.psi_scale * rng.random_range(-1.0..1.0)),
        }
        let jaw = model.jaw_offset();
        p.theta[jaw] = 0.15 * n * rng.random_range(0.0..1.0);
        for i in 0..3 {
            p.theta[i] = 0.1 * n * rng.random_range(-1.0..1.0);
        }
        p.lighting[..3].iter_mut().for_each(|l| *l = 0.9 + 0.1 * n * rng.random_range(-1.0..1.0));
        p.lighting[3..12].iter_mut().for_each(|l| *l = 0.3 * n * rng.random_range(-1.0..1.0));
        p.camera = [FRAMING_SCALE + 0.05 * n * rng.random_range(-1.0..1.0), 0.02 * n * rng.random_range(-1.0..1.0), 0.02 * n * rng.random_range(-1.0..1.0)];
        all_params.push(p);
    }
    let (w, h) = config.image_size;
    exec.map(all_params.len(), |i| {
        let params = all_params[i].clone();
        let mesh = model.evaluate_mesh(&params)?;
        let albedo = model.evaluate_albedo(&params.alpha)?;
        let camera = Camera::new(params.camera, w, h)?;
        let opts = RasterOptions { skin_triangles: model.skin_triangles.clone(), exec: Exec::Sequential };
        let render = renderer::rasterize(&mesh, &camera, &albedo.colors, &params.lighting, &opts)?;
        // the unclamped render, so ground-truth parameters reproduce it exactly
        let image = render.linear_image();
        let keypoints = renderer::project(&camera, &model.surface_landmarks(&mesh));
        let feature = extractor.extract(&image)?;
        let label = synthetic_label(&params.psi);
        Ok(SyntheticSample { image, params, keypoints, feature, label })
    })
    .into_iter()
    .collect()
}
