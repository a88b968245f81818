use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::template::parse_unify_prompt;
use super::{CaptionError, CaptionerEndpoint};

/// Request body: `{model, inputs, params}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub inputs: Vec<WireInput>,
    pub params: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum WireInput {
    /// Base64-encoded PNG.
    Image {
        data: String,
    },
    Text {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub text: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CallError {
    #[error("request timed out")]
    Timeout,
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl CallError {
    /// Worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            CallError::Timeout | CallError::Transport(_) => true,
            CallError::Http { status, .. } => *status == 429 || *status >= 500,
            CallError::Malformed(_) => false,
        }
    }
}

/// A captioning backend.
pub trait CaptionClient: Send + Sync {
    /// Backend label recorded in provenance.
    fn backend(&self) -> String;
    fn call(&self, request: &WireRequest) -> Result<String, CallError>;
}

/// JSON-over-HTTP client. The bearer token is read from the environment on
/// every call and never kept.
pub struct HttpCaptionClient {
    endpoint: CaptionerEndpoint,
    client: reqwest::blocking::Client,
}

impl HttpCaptionClient {
    pub fn new(endpoint: CaptionerEndpoint) -> Result<Self, CaptionError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout())
            .build()
            .map_err(|e| CaptionError::Config(format!("{}: {e}", endpoint.base_url)))?;
        Ok(Self { endpoint, client })
    }
}

impl CaptionClient for HttpCaptionClient {
    fn backend(&self) -> String {
        format!("{}@{}", self.endpoint.model_name, self.endpoint.base_url)
    }

    fn call(&self, request: &WireRequest) -> Result<String, CallError> {
        let mut req = self.client.post(&self.endpoint.base_url).json(request);
        let mut token = None;
        if let Some(var) = &self.endpoint.auth_env {
            match std::env::var(var) {
                Ok(t) => {
                    req = req.bearer_auth(&t);
                    token = Some(t);
                }
                Err(_) => log::warn!("auth variable {var} is not set; calling without credentials"),
            }
        }
        // Error text may come from the server; never let it carry the token.
        let redact = |s: String| match &token {
            Some(t) if !t.is_empty() => s.replace(t.as_str(), "[redacted]"),
            _ => s,
        };
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                CallError::Timeout
            } else {
                CallError::Transport(redact(e.without_url().to_string()))
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let body = redact(resp.text().unwrap_or_default());
            return Err(CallError::Http {
                status: status.as_u16(),
                body: body.chars().take(200).collect(),
            });
        }
        let parsed: WireResponse = resp
            .json()
            .map_err(|e| CallError::Malformed(redact(e.to_string())))?;
        Ok(parsed.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockKind {
    /// `frame:{i}` for the first submitted frame index.
    EchoFrame,
    /// `frames:{n}` for the number of submitted images.
    EchoFrames,
    /// `{attribute} | {action}` recovered from the unifier prompt.
    Concat,
}

/// Deterministic, thread-safe local captioner addressed as
/// `mock://echo-frame`, `mock://echo-frames` or `mock://concat`, with
/// optional query `fail_first=N` (first N calls per video fail with 503),
/// `poison=id1,id2` (empty replies for those videos) and `delay_ms=D`.
pub struct MockCaptionClient {
    pub kind: MockKind,
    pub fail_first: u32,
    pub poison: HashSet<String>,
    pub delay: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    failures: Mutex<HashMap<String, u32>>,
}

impl MockCaptionClient {
    pub fn new(kind: MockKind) -> Self {
        Self {
            kind,
            fail_first: 0,
            poison: HashSet::new(),
            delay: Duration::ZERO,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            failures: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_url(url: &str) -> Result<Self, CaptionError> {
        let rest = url
            .strip_prefix("mock://")
            .ok_or_else(|| CaptionError::Config(format!("not a mock url: {url}")))?;
        let (name, query) = rest.split_once('?').unwrap_or((rest, ""));
        let kind = match name {
            "echo-frame" => MockKind::EchoFrame,
            "echo-frames" => MockKind::EchoFrames,
            "concat" => MockKind::Concat,
            other => return Err(CaptionError::Config(format!("unknown mock `{other}`"))),
        };
        let mut m = Self::new(kind);
        for pair in query.split('&').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
            let num = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| CaptionError::Config(format!("mock option {k}: bad number `{v}`")))
            };
            match k {
                "fail_first" => m.fail_first = num(v)? as u32,
                "delay_ms" => m.delay = Duration::from_millis(num(v)?),
                "poison" => {
                    m.poison = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                other => {
                    return Err(CaptionError::Config(format!(
                        "unknown mock option `{other}`"
                    )))
                }
            }
        }
        Ok(m)
    }

    /// Calls received so far, failures included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneous calls observed.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn respond(&self, request: &WireRequest) -> Result<String, CallError> {
        let video = request
            .params
            .get("video_id")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        if self.fail_first > 0 {
            let mut f = self.failures.lock().expect("mock state");
            let n = f.entry(video.clone()).or_insert(0);
            if *n < self.fail_first {
                *n += 1;
                return Err(CallError::Http {
                    status: 503,
                    body: "mock unavailable".into(),
                });
            }
        }
        if self.poison.contains(&video) {
            return Ok(String::new());
        }
        match self.kind {
            MockKind::EchoFrame => {
                let i = request
                    .params
                    .get("frame_indices")
                    .and_then(|v| v.get(0))
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| CallError::Malformed("missing frame_indices".into()))?;
                Ok(format!("frame:{i}"))
            }
            MockKind::EchoFrames => {
                let n = request
                    .inputs
                    .iter()
                    .filter(|i| matches!(i, WireInput::Image { .. }))
                    .count();
                Ok(format!("frames:{n}"))
            }
            MockKind::Concat => {
                let prompt = request
                    .inputs
                    .iter()
                    .find_map(|i| match i {
                        WireInput::Text { text } => Some(text.as_str()),
                        _ => None,
                    })
                    .ok_or_else(|| CallError::Malformed("no text input".into()))?;
                let (a, b) = parse_unify_prompt(prompt)
                    .ok_or_else(|| CallError::Malformed("prompt does not match template".into()))?;
                Ok(format!("{a} | {b}"))
            }
        }
    }
}

impl CaptionClient for MockCaptionClient {
    fn backend(&self) -> String {
        match self.kind {
            MockKind::EchoFrame => "mock:echo-frame",
            MockKind::EchoFrames => "mock:echo-frames",
            MockKind::Concat => "mock:concat",
        }
        .into()
    }

    fn call(&self, request: &WireRequest) -> Result<String, CallError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let out = self.respond(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

/// Client for `endpoint`: `mock://` URLs map to [`MockCaptionClient`],
/// `http(s)://` to [`HttpCaptionClient`].
pub fn client_for(endpoint: &CaptionerEndpoint) -> Result<Arc<dyn CaptionClient>, CaptionError> {
    let url = &endpoint.base_url;
    if url.starts_with("mock://") {
        Ok(Arc::new(MockCaptionClient::from_url(url)?))
    } else if url.starts_with("http://") || url.starts_with("https://") {
        Ok(Arc::new(HttpCaptionClient::new(endpoint.clone())?))
    } else {
        Err(CaptionError::Config(format!(
            "unsupported endpoint url `{url}`"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(video: &str) -> WireRequest {
        let mut params = serde_json::Map::new();
        params.insert("video_id".into(), video.into());
        params.insert("frame_indices".into(), serde_json::json!([4]));
        WireRequest {
            model: "m".into(),
            inputs: vec![WireInput::Image {
                data: String::new(),
            }],
            params,
        }
    }

    #[test]
    fn mock_url_options() {
        let m = MockCaptionClient::from_url("mock://echo-frame?fail_first=2&poison=b").unwrap();
        assert!(m.call(&req("a")).is_err());
        assert!(m.call(&req("a")).is_err());
        assert_eq!(m.call(&req("a")).unwrap(), "frame:4");
        assert_eq!(m.calls(), 3);
        m.call(&req("b")).unwrap_err();
        m.call(&req("b")).unwrap_err();
        assert_eq!(m.call(&req("b")).unwrap(), "");
        assert!(MockCaptionClient::from_url("mock://nope").is_err());
        assert!(MockCaptionClient::from_url("mock://concat?bogus=1").is_err());
    }

    #[test]
    fn wire_format_is_tagged() {
        let r = req("v");
        let s = serde_json::to_value(&r).unwrap();
        assert_eq!(s["inputs"][0]["type"], "image");
        assert_eq!(s["params"]["video_id"], "v");
    }

    #[test]
    fn unknown_scheme_is_a_config_error() {
        assert!(client_for(&CaptionerEndpoint::new("ftp://x", "m")).is_err());
    }
}
