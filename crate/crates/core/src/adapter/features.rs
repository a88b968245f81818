use std::time::Duration;

use base64::Engine;
use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::imageio::encode_png;
use crate::tensor::{normal_matrix, rng_for, Stream};

use super::AdapterError;

/// `H × W × 3` image with values in `[0, 1]`.
pub type Image = Array3<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    /// `[n_tokens × d_img]`
    pub tokens: Array2<f64>,
    pub source_id: String,
}

/// Pluggable image feature backend.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    /// Smallest accepted `(height, width)`.
    fn min_size(&self) -> (usize, usize);
    fn n_tokens(&self) -> usize;
    fn dim(&self) -> usize;
    fn extract(&self, image: ArrayView3<'_, f32>) -> Result<Array2<f64>, String>;
}

pub fn extract_image_features(
    image: ArrayView3<'_, f32>,
    source_id: &str,
    extractor: &dyn FeatureExtractor,
) -> Result<ImageFeatures, AdapterError> {
    let (h, w, c) = image.dim();
    let invalid = |message: String| AdapterError::InvalidImage {
        source_id: source_id.to_string(),
        message,
    };
    if c != 3 {
        return Err(invalid(format!("expected 3 channels, got {c}")));
    }
    let (min_h, min_w) = extractor.min_size();
    if h < min_h || w < min_w {
        return Err(invalid(format!(
            "{h}x{w} is below the {} minimum of {min_h}x{min_w}",
            extractor.name()
        )));
    }
    if image.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(invalid("pixel values must lie in [0, 1]".into()));
    }
    let tokens = extractor
        .extract(image)
        .map_err(|message| AdapterError::Backend {
            source_id: source_id.to_string(),
            message,
        })?;
    if tokens.dim() != (extractor.n_tokens(), extractor.dim()) {
        return Err(AdapterError::Backend {
            source_id: source_id.to_string(),
            message: format!(
                "backend returned {:?}, declared [{}, {}]",
                tokens.dim(),
                extractor.n_tokens(),
                extractor.dim()
            ),
        });
    }
    if !crate::tensor::all_finite(&tokens) {
        return Err(AdapterError::Backend {
            source_id: source_id.to_string(),
            message: "backend returned non-finite features".into(),
        });
    }
    Ok(ImageFeatures {
        tokens,
        source_id: source_id.to_string(),
    })
}

/// Deterministic stand-in extractor: mean-pool a `rows × cols` grid of
/// patches, then map each RGB mean through a fixed `[3 × d]` matrix.
#[derive(Debug, Clone)]
pub struct PatchPoolExtractor {
    rows: usize,
    cols: usize,
    projection: Array2<f64>,
}

impl PatchPoolExtractor {
    pub fn new(rows: usize, cols: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::Extractor, 0);
        let projection = normal_matrix(&mut rng, 3, dim, 1.0);
        Self::with_projection(rows, cols, projection)
    }

    pub fn with_projection(rows: usize, cols: usize, projection: Array2<f64>) -> Self {
        assert!(rows > 0 && cols > 0, "grid must be non-empty");
        assert_eq!(projection.nrows(), 3, "projection maps RGB");
        Self {
            rows,
            cols,
            projection,
        }
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }
}

impl FeatureExtractor for PatchPoolExtractor {
    fn name(&self) -> &str {
        "patch-pool"
    }

    fn min_size(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn n_tokens(&self) -> usize {
        self.rows * self.cols
    }

    fn dim(&self) -> usize {
        self.projection.ncols()
    }

    fn extract(&self, image: ArrayView3<'_, f32>) -> Result<Array2<f64>, String> {
        let (h, w, _) = image.dim();
        let mut means = Array2::<f64>::zeros((self.n_tokens(), 3));
        for r in 0..self.rows {
            let (y0, y1) = (r * h / self.rows, (r + 1) * h / self.rows);
            for c in 0..self.cols {
                let (x0, x1) = (c * w / self.cols, (c + 1) * w / self.cols);
                let mut acc = [0.0f64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += image[[y, x, ch]] as f64;
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for (ch, a) in acc.iter().enumerate() {
                    means[[r * self.cols + c, ch]] = a / n;
                }
            }
        }
        Ok(means.dot(&self.projection))
    }
}

/// Feature extractor served by a remote pretrained model.
///
/// Sends `{model, inputs: [{type: "image", data: <base64 png>}], params: {}}`
/// and expects `{tokens: [[f64]]}` back.
#[derive(Debug, Clone)]
pub struct RemoteExtractor {
    pub url: String,
    pub model: String,
    pub min_size: (usize, usize),
    pub n_tokens: usize,
    pub dim: usize,
    pub timeout: Duration,
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    model: &'a str,
    inputs: Vec<RemoteInput>,
    params: serde_json::Value,
}

#[derive(Serialize)]
struct RemoteInput {
    #[serde(rename = "type")]
    kind: &'static str,
    data: String,
}

#[derive(Deserialize)]
struct RemoteResponse {
    tokens: Vec<Vec<f64>>,
}

impl FeatureExtractor for RemoteExtractor {
    fn name(&self) -> &str {
        &self.model
    }

    fn min_size(&self) -> (usize, usize) {
        self.min_size
    }

    fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: ArrayView3<'_, f32>) -> Result<Array2<f64>, String> {
        let png = encode_png(image).map_err(|e| e.to_string())?;
        let body = RemoteRequest {
            model: &self.model,
            inputs: vec![RemoteInput {
                kind: "image",
                data: base64::engine::general_purpose::STANDARD.encode(png),
            }],
            params: serde_json::json!({}),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| e.to_string())?;
        let resp = client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("http status {}", resp.status()));
        }
        let parsed: RemoteResponse = resp.json().map_err(|e| e.to_string())?;
        let rows = parsed.tokens.len();
        let cols = parsed.tokens.first().map_or(0, Vec::len);
        if parsed.tokens.iter().any(|r| r.len() != cols) {
            return Err("ragged token matrix".into());
        }
        Array2::from_shape_vec((rows, cols), parsed.tokens.into_iter().flatten().collect())
            .map_err(|e| e.to_string())
    }
}
