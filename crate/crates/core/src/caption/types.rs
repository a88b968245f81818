use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::CaptionError;

/// Attempts made at each stage beyond the first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRetries {
    pub attribute: u32,
    pub action: u32,
    pub unifier: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionProvenance {
    pub attribute_backend: String,
    pub action_backend: String,
    pub unifier_backend: String,
    pub attribute_frame: usize,
    pub action_frames: Vec<usize>,
    pub template_version: u32,
    pub retries: StageRetries,
    /// Unix milliseconds.
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

/// The three captions of one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionTriple {
    pub attribute: String,
    pub action: String,
    pub unified: String,
    pub provenance: CaptionProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(default)]
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_ms: 200,
        }
    }
}

/// One remote captioner. `auth_env` names the environment variable that
/// holds the bearer token; the token itself is never stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionerEndpoint {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    /// Frames a video captioner accepts per request.
    #[serde(default = "default_max_frames")]
    pub max_frames: usize,
    /// Word budget of the returned caption.
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_frames() -> usize {
    8
}

fn default_max_tokens() -> usize {
    77
}

impl CaptionerEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
            auth_env: None,
            max_frames: default_max_frames(),
            max_tokens: default_max_tokens(),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self, role: &str) -> Result<(), CaptionError> {
        let bad = |m: String| Err(CaptionError::Config(format!("{role}: {m}")));
        if self.base_url.is_empty() {
            return bad("base_url is empty".into());
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive".into());
        }
        if self.max_frames == 0 || self.max_tokens == 0 {
            return bad("max_frames and max_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Endpoint file: one captioner per role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub attribute: CaptionerEndpoint,
    pub action: CaptionerEndpoint,
    pub unifier: CaptionerEndpoint,
}

impl EndpointConfig {
    pub fn load(path: &Path) -> Result<Self, CaptionError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CaptionError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CaptionError::Config(format!("{}: {e}", path.display())))?;
        cfg.attribute.validate("attribute")?;
        cfg.action.validate("action")?;
        cfg.unifier.validate("unifier")?;
        Ok(cfg)
    }

    /// All three roles served by the local mocks.
    pub fn mock() -> Self {
        Self {
            attribute: CaptionerEndpoint::new("mock://echo-frame", "mock-attribute"),
            action: CaptionerEndpoint::new("mock://echo-frames", "mock-action"),
            unifier: CaptionerEndpoint::new("mock://concat", "mock-unifier"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.json");
        let mut cfg = EndpointConfig::mock();
        cfg.unifier.auth_env = Some("UNIFIER_TOKEN".into());
        fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(EndpointConfig::load(&p).unwrap(), cfg);

        cfg.action.timeout_ms = 0;
        fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert!(EndpointConfig::load(&p)
            .unwrap_err()
            .to_string()
            .contains("action"));
        assert!(EndpointConfig::load(&dir.path().join("missing.json")).is_err());
    }
}
