use serde::{Deserialize, Serialize};

use crate::tensor::sha256_hex;

use super::DiffusionError;

/// One resolution level of the toy UNet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    /// Channel width, also the attention width of the level's cross-attention.
    pub width: usize,
}

/// Structural description of the frozen toy backbone.
///
/// Level `i > 0` runs at half the spatial resolution of level `i - 1`. Every
/// level has exactly one cross-attention site; `temporal_level` places the
/// single temporal mixing layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub levels: Vec<LevelSpec>,
    pub temporal_level: Option<usize>,
    /// Text/face context width.
    pub d_ctx: usize,
    /// Number of text tokens produced by the text encoder.
    pub n_text: usize,
    pub d_time: usize,
    pub n_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Seed of the frozen weights.
    pub weight_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    CrossAttention,
    Temporal,
}

impl BackboneSpec {
    /// Two-level toy backbone over an `latent_size²` latent with 3 channels.
    pub fn toy(latent_size: usize) -> Self {
        Self {
            latent_channels: 3,
            latent_size,
            levels: vec![LevelSpec { width: 16 }, LevelSpec { width: 16 }],
            temporal_level: Some(0),
            d_ctx: 16,
            n_text: 8,
            d_time: 16,
            n_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            weight_seed: 0x1d_a11,
        }
    }

    /// Backbone matched to CI-preset clips (64² frames, 8× toy VAE).
    pub fn ci() -> Self {
        Self::toy(8)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |msg: String| Err(DiffusionError::Spec(msg));
        if self.levels.is_empty() {
            return bad("backbone needs at least one level".into());
        }
        if self.latent_channels == 0 || self.d_ctx == 0 || self.n_text == 0 {
            return bad("latent_channels, d_ctx and n_text must be positive".into());
        }
        if self.d_time == 0 || !self.d_time.is_multiple_of(2) {
            return bad(format!(
                "d_time must be positive and even, got {}",
                self.d_time
            ));
        }
        if self.levels.iter().any(|l| l.width == 0) {
            return bad("level widths must be positive".into());
        }
        let div = 1usize << (self.levels.len() - 1);
        if self.latent_size == 0 || !self.latent_size.is_multiple_of(div) {
            return bad(format!(
                "latent_size {} must be a positive multiple of {div}",
                self.latent_size
            ));
        }
        if let Some(t) = self.temporal_level {
            if t >= self.levels.len() {
                return bad(format!("temporal_level {t} out of range"));
            }
        }
        if self.n_steps == 0 {
            return bad("n_steps must be positive".into());
        }
        if !(self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start <= self.beta_end) {
            return bad("betas must satisfy 0 < beta_start <= beta_end < 1".into());
        }
        Ok(())
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.latent_size >> level
    }

    pub fn cross_attention_id(level: usize) -> String {
        format!("level{level}.cross_attn")
    }

    pub fn temporal_id(level: usize) -> String {
        format!("level{level}.temporal")
    }

    /// Ids of every cross-attention site, in forward order.
    pub fn cross_attention_layer_ids(&self) -> Vec<String> {
        (0..self.levels.len())
            .map(Self::cross_attention_id)
            .collect()
    }

    pub fn layers(&self) -> Vec<(String, LayerKind)> {
        let mut out = Vec::new();
        for i in 0..self.levels.len() {
            out.push((Self::cross_attention_id(i), LayerKind::CrossAttention));
            if self.temporal_level == Some(i) {
                out.push((Self::temporal_id(i), LayerKind::Temporal));
            }
        }
        out
    }

    /// Attention width at a cross-attention site.
    pub fn attn_width(&self, layer_id: &str) -> Option<usize> {
        (0..self.levels.len())
            .find(|&i| Self::cross_attention_id(i) == layer_id)
            .map(|i| self.levels[i].width)
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("spec serializes"))
    }
}
