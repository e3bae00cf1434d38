//! Emotion-driven 3D face capture on a toy morphable model: model evaluation,
//! a differentiable software renderer, perceptual emotion losses, affect
//! recognition, expression retargeting and embedding retrieval.

pub mod emotion_feature;
pub mod error;
pub mod exec;
pub mod face_model;
pub mod fitter;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod param_recognizer;
pub mod renderer;
pub mod retrieval;
pub mod rng;

pub use error::{Error, Result};
pub use exec::Exec;
