use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::Engine;
use ndarray::{ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_manifest, read_video_dir, write_manifest, DatasetRecord};
use crate::imageio::encode_png;

use super::client::{client_for, CaptionClient, WireInput, WireRequest};
use super::template::{render_unify_prompt, TEMPLATE_VERSION};
use super::{
    CaptionError, CaptionProvenance, CaptionTriple, CaptionerEndpoint, EndpointConfig, StageRetries,
};

/// ⌊T/2⌋, zero-based.
pub fn median_frame_index(n_frames: usize) -> usize {
    n_frames / 2
}

/// `⌊i·T/k⌋` for `i < k`, or every frame when `T ≤ k`.
pub fn subsample_indices(n_frames: usize, k: usize) -> Vec<usize> {
    if n_frames <= k {
        (0..n_frames).collect()
    } else {
        (0..k).map(|i| i * n_frames / k).collect()
    }
}

/// An endpoint and the client serving it.
#[derive(Clone)]
pub struct Captioner {
    pub endpoint: CaptionerEndpoint,
    pub client: Arc<dyn CaptionClient>,
}

impl Captioner {
    pub fn new(endpoint: CaptionerEndpoint, client: Arc<dyn CaptionClient>) -> Self {
        Self { endpoint, client }
    }

    pub fn from_endpoint(endpoint: &CaptionerEndpoint) -> Result<Self, CaptionError> {
        Ok(Self::new(endpoint.clone(), client_for(endpoint)?))
    }
}

/// The three roles.
#[derive(Clone)]
pub struct CaptionServices {
    pub attribute: Captioner,
    pub action: Captioner,
    pub unifier: Captioner,
}

impl CaptionServices {
    pub fn from_config(cfg: &EndpointConfig) -> Result<Self, CaptionError> {
        Ok(Self {
            attribute: Captioner::from_endpoint(&cfg.attribute)?,
            action: Captioner::from_endpoint(&cfg.action)?,
            unifier: Captioner::from_endpoint(&cfg.unifier)?,
        })
    }
}

/// Text returned by one stage and how it was obtained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutput {
    pub text: String,
    pub frames: Vec<usize>,
    pub retries: u32,
    pub calls: usize,
}

fn call_with_retry(
    c: &Captioner,
    req: &WireRequest,
    video_id: &str,
    stage: &str,
) -> Result<StageOutput, CaptionError> {
    let policy = &c.endpoint.retry;
    let mut attempt = 0u32;
    loop {
        match c.client.call(req) {
            Ok(text) if text.trim().is_empty() => {
                return Err(CaptionError::Content {
                    video_id: video_id.into(),
                    stage: stage.into(),
                    attempts: attempt + 1,
                })
            }
            Ok(text) => {
                return Ok(StageOutput {
                    text,
                    frames: Vec::new(),
                    retries: attempt,
                    calls: attempt as usize + 1,
                })
            }
            Err(e) if e.is_transient() && attempt < policy.max_retries => {
                log::debug!("{video_id} {stage}: attempt {} failed: {e}", attempt + 1);
                if policy.backoff_ms > 0 {
                    std::thread::sleep(std::time::Duration::from_millis(
                        policy.backoff_ms << attempt.min(6),
                    ));
                }
                attempt += 1;
            }
            Err(source) => {
                return Err(CaptionError::Call {
                    video_id: video_id.into(),
                    stage: stage.into(),
                    attempts: attempt + 1,
                    source,
                })
            }
        }
    }
}

fn image_inputs(
    clip: ArrayView4<'_, f32>,
    indices: &[usize],
) -> Result<Vec<WireInput>, CaptionError> {
    indices
        .iter()
        .map(|&i| {
            let png = encode_png(clip.index_axis(Axis(0), i))
                .map_err(|e| CaptionError::Argument(e.to_string()))?;
            Ok(WireInput::Image {
                data: base64::engine::general_purpose::STANDARD.encode(png),
            })
        })
        .collect()
}

fn request(model: &str, inputs: Vec<WireInput>, video_id: &str, frames: &[usize]) -> WireRequest {
    let mut params = serde_json::Map::new();
    params.insert("video_id".into(), video_id.into());
    params.insert("frame_indices".into(), serde_json::json!(frames));
    WireRequest {
        model: model.into(),
        inputs,
        params,
    }
}

/// Caption the median frame `⌊T/2⌋`.
pub fn attribute_caption(
    clip: ArrayView4<'_, f32>,
    video_id: &str,
    c: &Captioner,
) -> Result<StageOutput, CaptionError> {
    let t = clip.dim().0;
    if t == 0 {
        return Err(CaptionError::Argument(format!(
            "{video_id}: clip has no frames"
        )));
    }
    let frames = vec![median_frame_index(t)];
    let req = request(
        &c.endpoint.model_name,
        image_inputs(clip, &frames)?,
        video_id,
        &frames,
    );
    let mut out = call_with_retry(c, &req, video_id, "attribute")?;
    out.frames = frames;
    Ok(out)
}

/// Caption the whole clip, evenly subsampled to the endpoint's frame limit.
pub fn action_caption(
    clip: ArrayView4<'_, f32>,
    video_id: &str,
    c: &Captioner,
) -> Result<StageOutput, CaptionError> {
    let t = clip.dim().0;
    if t == 0 {
        return Err(CaptionError::Argument(format!(
            "{video_id}: clip has no frames"
        )));
    }
    let frames = subsample_indices(t, c.endpoint.max_frames);
    let req = request(
        &c.endpoint.model_name,
        image_inputs(clip, &frames)?,
        video_id,
        &frames,
    );
    let mut out = call_with_retry(c, &req, video_id, "action")?;
    out.frames = frames;
    Ok(out)
}

/// Merge both captions with the unifier, truncated to `max_tokens` words.
pub fn unify_captions(
    attribute: &str,
    action: &str,
    video_id: &str,
    c: &Captioner,
) -> Result<StageOutput, CaptionError> {
    if attribute.trim().is_empty() || action.trim().is_empty() {
        return Err(CaptionError::Argument(format!(
            "{video_id}: unify needs nonempty attribute and action captions"
        )));
    }
    let inputs = vec![WireInput::Text {
        text: render_unify_prompt(attribute, action),
    }];
    let req = request(&c.endpoint.model_name, inputs, video_id, &[]);
    let mut out = call_with_retry(c, &req, video_id, "unify")?;
    let words: Vec<&str> = out.text.split_whitespace().collect();
    if words.len() > c.endpoint.max_tokens {
        out.text = words[..c.endpoint.max_tokens].join(" ");
    }
    Ok(out)
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// All three stages for one clip. Returns the triple and the client calls made.
pub fn caption_clip(
    clip: ArrayView4<'_, f32>,
    video_id: &str,
    services: &CaptionServices,
    calls: &AtomicUsize,
) -> Result<CaptionTriple, CaptionError> {
    let started_at_ms = now_ms();
    let count = |r: &Result<StageOutput, CaptionError>| {
        let n = match r {
            Ok(o) => o.calls,
            Err(CaptionError::Call { attempts, .. } | CaptionError::Content { attempts, .. }) => {
                *attempts as usize
            }
            Err(_) => 0,
        };
        calls.fetch_add(n, Ordering::SeqCst);
    };
    let attr = attribute_caption(clip, video_id, &services.attribute);
    count(&attr);
    let attr = attr?;
    let act = action_caption(clip, video_id, &services.action);
    count(&act);
    let act = act?;
    let uni = unify_captions(&attr.text, &act.text, video_id, &services.unifier);
    count(&uni);
    let uni = uni?;
    Ok(CaptionTriple {
        attribute: attr.text,
        action: act.text,
        unified: uni.text,
        provenance: CaptionProvenance {
            attribute_backend: services.attribute.client.backend(),
            action_backend: services.action.client.backend(),
            unifier_backend: services.unifier.client.backend(),
            attribute_frame: attr.frames[0],
            action_frames: act.frames,
            template_version: TEMPLATE_VERSION,
            retries: StageRetries {
                attribute: attr.retries,
                action: act.retries,
                unifier: uni.retries,
            },
            started_at_ms,
            finished_at_ms: now_ms(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub video_id: String,
    pub stage: String,
    pub error: String,
    pub attempt_count: u32,
}

#[derive(Debug, Clone)]
pub struct CaptionOptions {
    pub concurrency: usize,
    /// Defaults to `<manifest>.quarantine.jsonl`.
    pub quarantine: Option<PathBuf>,
}

impl Default for CaptionOptions {
    fn default() -> Self {
        Self {
            concurrency: 4,
            quarantine: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSummary {
    pub records: usize,
    pub already_captioned: usize,
    pub captioned: usize,
    pub quarantined: usize,
    pub new_calls: usize,
    pub quarantine_file: PathBuf,
}

fn quarantine_entry(video_id: &str, e: &CaptionError) -> QuarantineEntry {
    let (stage, attempts) = match e {
        CaptionError::Call {
            stage, attempts, ..
        }
        | CaptionError::Content {
            stage, attempts, ..
        } => (stage.clone(), *attempts),
        CaptionError::Dataset(_) => ("load".into(), 0),
        _ => ("precondition".into(), 0),
    };
    QuarantineEntry {
        video_id: video_id.into(),
        stage,
        error: e.to_string(),
        attempt_count: attempts,
    }
}

/// Give every manifest record a caption triple.
///
/// Records that already carry one are skipped, so a rerun makes no client
/// calls for them. Up to `concurrency` records are in flight at once, each
/// running its stages in order, so at most `concurrency` client requests are
/// outstanding. The manifest is rewritten after every completed record;
/// failures go to the quarantine file and never abort the run.
pub fn caption_corpus(
    manifest: &Path,
    services: &CaptionServices,
    opts: &CaptionOptions,
) -> Result<CaptionSummary, CaptionError> {
    if opts.concurrency == 0 {
        return Err(CaptionError::Config(
            "concurrency must be at least 1".into(),
        ));
    }
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let records = read_manifest(manifest)?;
    let quarantine_file = opts
        .quarantine
        .clone()
        .unwrap_or_else(|| manifest.with_extension("quarantine.jsonl"));
    let todo: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].captions.is_none())
        .collect();
    let mut summary = CaptionSummary {
        records: records.len(),
        already_captioned: records.len() - todo.len(),
        quarantine_file: quarantine_file.clone(),
        ..Default::default()
    };

    let shared = Mutex::new(records);
    let quarantine = Mutex::new(Vec::<QuarantineEntry>::new());
    let calls = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let first_error = Mutex::new(None::<CaptionError>);

    let work = |rec: DatasetRecord| -> Result<CaptionTriple, CaptionError> {
        let clip = read_video_dir(&root.join(&rec.clip_path))?;
        caption_clip(clip.view(), &rec.video_id, services, &calls)
    };

    std::thread::scope(|s| {
        for _ in 0..opts.concurrency.min(todo.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = todo.get(k) else { break };
                let rec = shared.lock().expect("manifest lock")[i].clone();
                match work(rec.clone()) {
                    Ok(triple) => {
                        let mut all = shared.lock().expect("manifest lock");
                        all[i].unified_caption = triple.unified.clone();
                        all[i].captions = Some(triple);
                        if let Err(e) = write_manifest(&all, manifest) {
                            first_error
                                .lock()
                                .expect("error lock")
                                .get_or_insert(e.into());
                        }
                    }
                    Err(e) => {
                        log::warn!("quarantined {}: {e}", rec.video_id);
                        let entry = quarantine_entry(&rec.video_id, &e);
                        let mut q = quarantine.lock().expect("quarantine lock");
                        let line = serde_json::to_string(&entry).expect("entry serializes");
                        let res = OpenOptions::new()
                            .create(true)
                            .append(true)
                            .open(&quarantine_file)
                            .and_then(|mut f| writeln!(f, "{line}"));
                        if let Err(e) = res {
                            first_error.lock().expect("error lock").get_or_insert(
                                CaptionError::Io {
                                    path: quarantine_file.clone(),
                                    source: e,
                                },
                            );
                        }
                        q.push(entry);
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let q = quarantine.into_inner().expect("quarantine lock");
    summary.quarantined = q.len();
    summary.captioned = todo.len() - q.len();
    summary.new_calls = calls.load(Ordering::SeqCst);
    Ok(summary)
}
