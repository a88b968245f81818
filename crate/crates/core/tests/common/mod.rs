#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use idkit_core::caption::{
    caption_corpus, CaptionOptions, CaptionServices, Captioner, CaptionerEndpoint, EndpointConfig,
    MockCaptionClient,
};
use idkit_core::dataset::{
    build_dataset, generate_synthetic_corpus, write_corpus, BuildConfig, CorpusSpec,
};
use ndarray::Array2;

/// Synthetic corpus built with the CI preset, not yet captioned. Returns the
/// manifest path.
pub fn ci_built(dir: &Path, n_videos: usize, n_multi: usize, seed: u64) -> PathBuf {
    let corpus = generate_synthetic_corpus(&CorpusSpec::simple(n_videos, n_multi), seed).unwrap();
    let raw = dir.join("raw");
    write_corpus(&corpus, &raw).unwrap();
    let manifest = dir.join("data").join("manifest.jsonl");
    build_dataset(&raw, &manifest, &BuildConfig::ci()).unwrap();
    manifest
}

/// [`ci_built`], then captioned by the mock services.
pub fn ci_dataset(dir: &Path, n_videos: usize, n_multi: usize, seed: u64) -> PathBuf {
    let manifest = ci_built(dir, n_videos, n_multi, seed);
    let services = CaptionServices::from_config(&EndpointConfig::mock()).unwrap();
    caption_corpus(&manifest, &services, &CaptionOptions::default()).unwrap();
    manifest
}

/// Mock-backed services with no retry backoff, plus handles on the mocks.
pub fn mock_services(urls: [&str; 3]) -> (CaptionServices, [Arc<MockCaptionClient>; 3]) {
    let mocks = urls.map(|u| Arc::new(MockCaptionClient::from_url(u).unwrap()));
    let captioner = |i: usize, model: &str| {
        let mut ep = CaptionerEndpoint::new(urls[i], model);
        ep.retry.backoff_ms = 0;
        Captioner::new(ep, mocks[i].clone())
    };
    let services = CaptionServices {
        attribute: captioner(0, "attr"),
        action: captioner(1, "act"),
        unifier: captioner(2, "uni"),
    };
    (services, mocks)
}

/// `max |a − b| / max |b|`, the relative error used throughout the tests.
pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `row · M` with explicit loops.
fn project(row: &[f64], m: &Array2<f64>) -> Vec<f64> {
    (0..m.ncols())
        .map(|j| (0..m.nrows()).map(|i| row[i] * m[[i, j]]).sum())
        .collect()
}

fn attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let d = q.len() as f64;
    let scores: Vec<f64> = keys.iter().map(|k| dot(q, k) / d.sqrt()).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w / total * x;
        }
    }
    out
}

/// Term-by-term evaluation of text attention plus `lambda` times image
/// attention, one query row at a time.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_decoupled(
    z: &Array2<f64>,
    text: &Array2<f64>,
    image: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
    wk_img: &Array2<f64>,
    wv_img: &Array2<f64>,
    lambda: f64,
) -> Array2<f64> {
    let proj_all = |ctx: &Array2<f64>, w: &Array2<f64>| -> Vec<Vec<f64>> {
        ctx.outer_iter()
            .map(|r| project(r.as_slice().unwrap(), w))
            .collect()
    };
    let (kt, vt) = (proj_all(text, wk), proj_all(text, wv));
    let (ki, vi) = (proj_all(image, wk_img), proj_all(image, wv_img));
    let mut out = Array2::zeros((z.nrows(), wq.ncols()));
    for (r, row) in z.outer_iter().enumerate() {
        let q = project(row.as_slice().unwrap(), wq);
        let a = attend(&q, &kt, &vt);
        let b = attend(&q, &ki, &vi);
        for j in 0..a.len() {
            out[[r, j]] = a[j] + lambda * b[j];
        }
    }
    out
}
