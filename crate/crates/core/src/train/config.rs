use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::diffusion::BackboneSpec;

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub null_text_prob: f64,
    /// Independent probability of dropping the face condition.
    #[serde(default)]
    pub face_drop_prob: f64,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub lambda_train: f64,
    /// Consecutive non-finite steps tolerated before reloading the last
    /// checkpoint.
    #[serde(default = "default_nonfinite_patience")]
    pub nonfinite_patience: usize,
    #[serde(default = "BackboneSpec::ci")]
    pub backbone: BackboneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
}

fn default_nonfinite_patience() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 2,
            null_text_prob: 0.2,
            face_drop_prob: 0.0,
            steps: 200,
            seed: 0,
            checkpoint_every: 50,
            lambda_train: 1.0,
            nonfinite_patience: default_nonfinite_patience(),
            backbone: BackboneSpec::ci(),
            adapter: None,
        }
    }
}

impl TrainConfig {
    /// Hard errors only; see [`TrainConfig::warnings`] for legal oddities.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        for (name, p) in [
            ("null_text_prob", self.null_text_prob),
            ("face_drop_prob", self.face_drop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if !(self.lambda_train.is_finite() && self.lambda_train >= 0.0) {
            return bad(format!(
                "lambda_train must be finite and >= 0, got {}",
                self.lambda_train
            ));
        }
        self.backbone
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.lr == 0.0 {
            w.push("lr is 0: adapter weights will not change".into());
        }
        if self.null_text_prob == 1.0 {
            w.push("null_text_prob is 1: the text condition is never seen".into());
        }
        w
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        self.adapter
            .clone()
            .unwrap_or_else(|| AdapterConfig::for_backbone(&self.backbone))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_a_warning_not_an_error() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.warnings().len(), 1);
        let cfg = TrainConfig {
            lr: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let cfg: TrainConfig = serde_json::from_str(
            r#"{"lr":0.001,"batch_size":2,"null_text_prob":0.2,"steps":5,"seed":1,"checkpoint_every":2,"lambda_train":1.0}"#,
        )
        .unwrap();
        assert_eq!(cfg.backbone, BackboneSpec::ci());
        let back: TrainConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
