//! Toy latent video-diffusion backbone with adapter-injectable
//! cross-attention, a temporal mixing layer the adapter never touches, the
//! noise-prediction losses and a classifier-free-guidance sampler.

mod backbone;
mod config;
mod loss;
mod pipeline;
mod sampler;
mod schedule;
mod spec;
mod text;
mod vae;

pub use backbone::{adapter_hook_sites, predict_noise, BackboneWeights, Denoiser};
pub use config::GenerationConfig;
pub use loss::{loss_and_gradients, mean_squared_error, training_loss, TrainingExample};
pub use pipeline::{generate_video, reference_tokens, GeneratedVideo};
pub use sampler::{cfg_sample, sampling_timesteps, Guidance, SampleRequest, UncondMode};
pub use schedule::{forward_diffuse, NoiseSchedule};
pub use spec::{BackboneSpec, LayerKind, LevelSpec};
pub use text::TextEncoder;
pub use vae::{decode_latent, ToyVae};

use ndarray::{Array2, Array4};
use thiserror::Error;

use crate::adapter::{AdapterError, FaceTokens, ImageFeatures};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid backbone spec: {0}")]
    Spec(String),
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// `[T × C × H × W]` latent video.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub z: Array4<f64>,
    pub frame_rate_hint: Option<f64>,
}

impl LatentVideo {
    pub fn new(z: Array4<f64>) -> Result<Self, DiffusionError> {
        if z.dim().0 == 0 {
            return Err(DiffusionError::Argument(
                "latent video needs at least one frame".into(),
            ));
        }
        if !crate::tensor::all_finite(&z) {
            return Err(DiffusionError::NonFinite("latent video".into()));
        }
        Ok(Self {
            z,
            frame_rate_hint: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.z.dim().0
    }
}

/// The image condition handed to the backbone.
#[derive(Debug, Clone, PartialEq)]
pub enum FaceCondition {
    /// Already-encoded identity tokens (inference, mixing).
    Tokens(FaceTokens),
    /// Raw reference features, encoded on the fly so the encoder trains.
    Features(ImageFeatures),
}

/// Text condition plus optional face condition for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    /// `[n_text × d_ctx]`
    pub text_embedding: Array2<f64>,
    pub face: Option<FaceCondition>,
    pub null_text: bool,
}

impl ConditionBundle {
    pub fn new(text_embedding: Array2<f64>, face: Option<FaceCondition>) -> Self {
        Self {
            text_embedding,
            face,
            null_text: false,
        }
    }

    /// Same face condition, null text.
    pub fn with_null_text(&self, null_embedding: &Array2<f64>) -> Self {
        Self {
            text_embedding: null_embedding.clone(),
            face: self.face.clone(),
            null_text: true,
        }
    }
}

/// Anything that predicts the noise in `z_t`.
pub trait NoisePredictor {
    fn predict(
        &self,
        z_t: &LatentVideo,
        t: usize,
        cond: &ConditionBundle,
    ) -> Result<Array4<f64>, DiffusionError>;
}
