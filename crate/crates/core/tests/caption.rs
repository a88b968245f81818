mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use common::{ci_built, mock_services};
use idkit_core::caption::{
    action_caption, attribute_caption, caption_corpus, CallError, CaptionClient, CaptionOptions,
    CaptionServices, Captioner, CaptionerEndpoint, QuarantineEntry, WireRequest,
};
use idkit_core::dataset::read_manifest;
use ndarray::Array4;

const MOCKS: [&str; 3] = ["mock://echo-frame", "mock://echo-frames", "mock://concat"];

#[test]
fn attribute_stage_submits_the_median_frame() {
    let (services, _) = mock_services(MOCKS);
    for t in 1..64 {
        let clip = Array4::<f32>::zeros((t, 4, 4, 3));
        let out = attribute_caption(clip.view(), "v", &services.attribute).unwrap();
        assert_eq!(out.frames, vec![t / 2]);
        assert_eq!(out.text, format!("frame:{}", t / 2));
    }
}

#[test]
fn action_stage_subsamples_evenly() {
    let (services, _) = mock_services(MOCKS);
    let clip = Array4::<f32>::zeros((16, 4, 4, 3));
    let out = action_caption(clip.view(), "v", &services.action).unwrap();
    assert_eq!(out.frames, (0..16).step_by(2).collect::<Vec<_>>());
    assert_eq!(out.text, "frames:8");
    let short = Array4::<f32>::zeros((5, 4, 4, 3));
    assert_eq!(
        action_caption(short.view(), "v", &services.action)
            .unwrap()
            .frames,
        vec![0, 1, 2, 3, 4]
    );
}

#[test]
fn second_corpus_run_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_built(dir.path(), 4, 0, 1);
    let (services, mocks) = mock_services(MOCKS);
    let first = caption_corpus(&manifest, &services, &CaptionOptions::default()).unwrap();
    assert_eq!((first.captioned, first.new_calls), (4, 12));
    let before: Vec<usize> = mocks.iter().map(|m| m.calls()).collect();
    let second = caption_corpus(&manifest, &services, &CaptionOptions::default()).unwrap();
    assert_eq!((second.already_captioned, second.new_calls), (4, 0));
    assert_eq!(mocks.iter().map(|m| m.calls()).collect::<Vec<_>>(), before);
    for r in read_manifest(&manifest).unwrap() {
        let c = r.captions.unwrap();
        assert_eq!(c.unified, r.unified_caption);
        assert_eq!(c.unified, format!("{} | {}", c.attribute, c.action));
    }
}

#[test]
fn poisoned_and_failing_records_are_quarantined() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_built(dir.path(), 4, 0, 2);
    let (services, _) = mock_services([
        "mock://echo-frame?poison=vid_001",
        "mock://echo-frames",
        "mock://concat",
    ]);
    let summary = caption_corpus(&manifest, &services, &CaptionOptions::default()).unwrap();
    assert_eq!((summary.captioned, summary.quarantined), (3, 1));
    let text = std::fs::read_to_string(&summary.quarantine_file).unwrap();
    let entries: Vec<QuarantineEntry> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(entries.len(), 1);
    assert_eq!(
        (entries[0].video_id.as_str(), entries[0].stage.as_str()),
        ("vid_001", "attribute")
    );
    let records = read_manifest(&manifest).unwrap();
    assert!(records
        .iter()
        .all(|r| r.captions.is_some() == (r.video_id != "vid_001")));

    // Transient failures beyond the retry budget.
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_built(dir.path(), 2, 0, 3);
    let (services, _) = mock_services([
        "mock://echo-frame",
        "mock://echo-frames?fail_first=10",
        "mock://concat",
    ]);
    let summary = caption_corpus(&manifest, &services, &CaptionOptions::default()).unwrap();
    assert_eq!(summary.quarantined, 2);
    let text = std::fs::read_to_string(&summary.quarantine_file).unwrap();
    for l in text.lines() {
        let e: QuarantineEntry = serde_json::from_str(l).unwrap();
        assert_eq!((e.stage.as_str(), e.attempt_count), ("action", 4));
    }

    // Within the budget the retries succeed and are recorded.
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_built(dir.path(), 2, 0, 3);
    let (services, _) = mock_services([
        "mock://echo-frame",
        "mock://echo-frames?fail_first=2",
        "mock://concat",
    ]);
    let summary = caption_corpus(&manifest, &services, &CaptionOptions::default()).unwrap();
    assert_eq!((summary.captioned, summary.quarantined), (2, 0));
    for r in read_manifest(&manifest).unwrap() {
        assert_eq!(r.captions.unwrap().provenance.retries.action, 2);
    }
}

struct Gauged {
    inner: Arc<dyn CaptionClient>,
    now: Arc<AtomicUsize>,
    max: Arc<AtomicUsize>,
}

impl CaptionClient for Gauged {
    fn backend(&self) -> String {
        self.inner.backend()
    }

    fn call(&self, request: &WireRequest) -> Result<String, CallError> {
        let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
        self.max.fetch_max(n, Ordering::SeqCst);
        let out = self.inner.call(request);
        self.now.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

#[test]
fn in_flight_requests_never_exceed_the_limit() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_built(dir.path(), 6, 0, 4);
    for k in [1, 2, 3] {
        let (base, _) = mock_services([
            "mock://echo-frame?delay_ms=15",
            "mock://echo-frames?delay_ms=15",
            "mock://concat?delay_ms=15",
        ]);
        let (now, max) = (Arc::new(AtomicUsize::new(0)), Arc::new(AtomicUsize::new(0)));
        let wrap = |c: Captioner| {
            Captioner::new(
                c.endpoint,
                Arc::new(Gauged {
                    inner: c.client,
                    now: now.clone(),
                    max: max.clone(),
                }),
            )
        };
        let services = CaptionServices {
            attribute: wrap(base.attribute),
            action: wrap(base.action),
            unifier: wrap(base.unifier),
        };
        // Fresh manifest copy per limit.
        let m = dir.path().join("data").join(format!("m{k}.jsonl"));
        std::fs::copy(&manifest, &m).unwrap();
        let opts = CaptionOptions {
            concurrency: k,
            quarantine: None,
        };
        assert_eq!(caption_corpus(&m, &services, &opts).unwrap().captioned, 6);
        let seen = max.load(Ordering::SeqCst);
        assert!(seen <= k && seen >= 1, "limit {k}, saw {seen}");
    }
}

/// Answers every request with a 500 whose body echoes the Authorization
/// header back, and records what it received.
fn leaky_server() -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/caption", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut auth, mut len) = (String::new(), 0usize);
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if lower.starts_with("authorization:") {
                    auth = line["authorization:".len()..].trim().to_string();
                }
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            log.lock().unwrap().push(auth.clone());
            let reply = format!("rejected credentials {auth}");
            let _ = write!(
                stream,
                "HTTP/1.1 500 Internal Server Error\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    (url, seen)
}

#[test]
fn secrets_never_reach_manifest_or_quarantine() {
    const VAR: &str = "IDKIT_TEST_CAPTION_TOKEN";
    const SECRET: &str = "sk-test-5ecret-value";
    std::env::set_var(VAR, SECRET);
    let (url, seen) = leaky_server();
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_built(dir.path(), 2, 0, 5);
    let mut ep = CaptionerEndpoint::new(url, "attr");
    ep.auth_env = Some(VAR.into());
    ep.retry.max_retries = 1;
    ep.retry.backoff_ms = 0;
    ep.timeout_ms = 5_000;
    let (mocks, _) = mock_services(MOCKS);
    let services = CaptionServices {
        attribute: Captioner::from_endpoint(&ep).unwrap(),
        ..mocks
    };
    let summary = caption_corpus(&manifest, &services, &CaptionOptions::default()).unwrap();
    assert_eq!(summary.quarantined, 2);

    let received = seen.lock().unwrap().clone();
    assert!(!received.is_empty() && received.iter().all(|a| a == &format!("Bearer {SECRET}")));
    for path in [&manifest, &summary.quarantine_file] {
        let text = std::fs::read_to_string(path).unwrap();
        assert!(!text.contains(SECRET), "{} leaks the token", path.display());
    }
    let q = std::fs::read_to_string(&summary.quarantine_file).unwrap();
    assert!(q.contains("[redacted]"));
}
