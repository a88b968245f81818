use serde::{Deserialize, Serialize};

use super::{DiffusionError, UncondMode};

/// User-facing generation settings, JSON round-trippable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub prompt: String,
    pub reference_images: Vec<String>,
    /// One weight per reference; empty means a single reference at weight 1.
    #[serde(default)]
    pub mix_weights: Vec<f64>,
    pub lambda: f64,
    pub guidance_scale: f64,
    pub frames: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub uncond_mode: UncondMode,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            reference_images: Vec::new(),
            mix_weights: Vec::new(),
            lambda: 1.0,
            guidance_scale: 7.5,
            frames: 16,
            steps: 25,
            seed: 0,
            uncond_mode: UncondMode::default(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: String| Err(DiffusionError::Config(m));
        if !self.mix_weights.is_empty() && self.mix_weights.len() != self.reference_images.len() {
            return bad(format!(
                "{} mix weights given for {} reference images",
                self.mix_weights.len(),
                self.reference_images.len()
            ));
        }
        if self.mix_weights.is_empty() && self.reference_images.len() > 1 {
            return bad("several reference images need explicit mix weights".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            ));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return bad(format!(
                "guidance_scale must be finite and >= 0, got {}",
                self.guidance_scale
            ));
        }
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        Ok(())
    }

    /// Weights aligned with `reference_images`.
    pub fn resolved_weights(&self) -> Vec<f64> {
        if self.mix_weights.is_empty() {
            vec![1.0; self.reference_images.len()]
        } else {
            self.mix_weights.clone()
        }
    }
}
