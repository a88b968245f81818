use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imageio::{read_png, write_png};

use super::detect::{detect_faces, FaceBox, FaceDetector};
use super::frames::{resize_frame, RawVideo};
use super::{image_err, io_err, json_err, DatasetError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub pool_target: usize,
    pub ref_size: usize,
    /// Frames examined before giving up; `None` means `3 × pool_target`.
    pub max_attempts: Option<usize>,
    /// Padding added on each side of the square crop, as a fraction of the
    /// box's longer side.
    pub margin: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            pool_target: 5,
            ref_size: 224,
            max_attempts: None,
            margin: 0.2,
        }
    }
}

impl PoolConfig {
    pub fn ci() -> Self {
        Self {
            pool_target: 3,
            ref_size: 32,
            ..Self::default()
        }
    }

    pub fn attempts(&self) -> usize {
        self.max_attempts.unwrap_or(3 * self.pool_target)
    }
}

/// Detector evidence for one examined frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub frame_index: usize,
    pub n_faces: usize,
}

/// Single-face crops from randomly chosen frames of one video, plus the
/// detection log of every frame examined while building it.
#[derive(Debug, Clone, PartialEq)]
pub struct FacePool {
    pub video_id: String,
    pub crops: Vec<Array3<f32>>,
    pub source_frames: Vec<usize>,
    pub boxes: Vec<FaceBox>,
    pub detections: Vec<FrameDetection>,
}

impl FacePool {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    /// Examined frames that showed two or more faces.
    pub fn multi_face_attempts(&self) -> usize {
        self.detections.iter().filter(|d| d.n_faces >= 2).count()
    }
}

/// Square `(x0, y0, side)` around `b`, padded by `margin` per side and
/// shifted to stay inside a `w × h` frame.
fn square_crop(b: &FaceBox, w: usize, h: usize, margin: f64) -> (usize, usize, usize) {
    let long = b.width().max(b.height()) as f64;
    let side = ((long * (1.0 + 2.0 * margin)).round() as usize).clamp(1, w.min(h));
    let cx = (b.x0 + b.x1) as f64 / 2.0;
    let cy = (b.y0 + b.y1) as f64 / 2.0;
    let place = |c: f64, limit: usize| {
        ((c - side as f64 / 2.0).round().max(0.0) as usize).min(limit - side)
    };
    (place(cx, w), place(cy, h), side)
}

/// Walk the shuffled frame order, keep frames with exactly one detected
/// face, stop at `pool_target` crops or after `max_attempts` frames.
/// The result may be empty.
pub fn collect_face_pool<R: Rng>(
    video: &RawVideo,
    detector: &dyn FaceDetector,
    rng: &mut R,
    cfg: &PoolConfig,
) -> Result<FacePool, DatasetError> {
    if cfg.pool_target == 0 || cfg.ref_size == 0 {
        return Err(DatasetError::Argument(
            "pool_target and ref_size must be positive".into(),
        ));
    }
    if video.is_empty() {
        return Err(DatasetError::Argument(format!(
            "video {} has no frames",
            video.video_id
        )));
    }
    let mut order: Vec<usize> = (0..video.len()).collect();
    order.shuffle(rng);
    let (_, h, w, _) = video.frames.dim();
    let mut pool = FacePool {
        video_id: video.video_id.clone(),
        crops: Vec::new(),
        source_frames: Vec::new(),
        boxes: Vec::new(),
        detections: Vec::new(),
    };
    for &i in order.iter().take(cfg.attempts()) {
        if pool.len() == cfg.pool_target {
            break;
        }
        let boxes = detect_faces(video.frame(i), i, detector)?;
        pool.detections.push(FrameDetection {
            frame_index: i,
            n_faces: boxes.len(),
        });
        if boxes.len() != 1 {
            continue;
        }
        let b = boxes[0];
        let (x0, y0, side) = square_crop(&b, w, h, cfg.margin);
        let frame = video.frame(i);
        let crop = frame.slice(s![y0..y0 + side, x0..x0 + side, ..]);
        // Stored crops are 8-bit PNGs; keep the in-memory pool on the same grid.
        let crop = resize_frame(crop, cfg.ref_size).mapv(|v| (v * 255.0).round() / 255.0);
        pool.crops.push(crop);
        pool.source_frames.push(i);
        pool.boxes.push(b);
    }
    Ok(pool)
}

/// [`collect_face_pool`], with an empty pool turned into an error.
pub fn build_face_pool<R: Rng>(
    video: &RawVideo,
    detector: &dyn FaceDetector,
    rng: &mut R,
    cfg: &PoolConfig,
) -> Result<FacePool, DatasetError> {
    let pool = collect_face_pool(video, detector, rng, cfg)?;
    if pool.is_empty() {
        return Err(DatasetError::EmptyPool {
            video_id: video.video_id.clone(),
            attempts: pool.detections.len(),
        });
    }
    Ok(pool)
}

/// A uniformly chosen crop and its index.
pub fn sample_random_reference<'a, R: Rng>(
    pool: &'a FacePool,
    rng: &mut R,
) -> Result<(usize, &'a Array3<f32>), DatasetError> {
    if pool.is_empty() {
        return Err(DatasetError::Argument(format!(
            "face pool of {} is empty",
            pool.video_id
        )));
    }
    let i = rng.random_range(0..pool.len());
    Ok((i, &pool.crops[i]))
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolFile {
    video_id: String,
    source_frames: Vec<usize>,
    boxes: Vec<FaceBox>,
    crops: Vec<String>,
    detections: Vec<FrameDetection>,
}

fn crop_name(i: usize) -> String {
    format!("crop_{i:02}.png")
}

/// Crops as PNGs plus `pool.json` in `dir`.
pub fn write_pool(dir: &Path, pool: &FacePool) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut names = Vec::with_capacity(pool.len());
    for (i, c) in pool.crops.iter().enumerate() {
        let p = dir.join(crop_name(i));
        write_png(&p, c.view()).map_err(image_err(&p))?;
        names.push(crop_name(i));
    }
    let meta = PoolFile {
        video_id: pool.video_id.clone(),
        source_frames: pool.source_frames.clone(),
        boxes: pool.boxes.clone(),
        crops: names,
        detections: pool.detections.clone(),
    };
    let p = dir.join("pool.json");
    let text = serde_json::to_string_pretty(&meta).map_err(json_err(&p))?;
    fs::write(&p, text).map_err(io_err(&p))
}

pub fn read_pool(dir: &Path) -> Result<FacePool, DatasetError> {
    let p = dir.join("pool.json");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let meta: PoolFile = serde_json::from_str(&text).map_err(json_err(&p))?;
    if meta.crops.len() != meta.source_frames.len() || meta.crops.len() != meta.boxes.len() {
        return Err(DatasetError::Pool {
            path: dir.into(),
            message: format!(
                "{} crops, {} source frames, {} boxes",
                meta.crops.len(),
                meta.source_frames.len(),
                meta.boxes.len()
            ),
        });
    }
    let mut crops = Vec::with_capacity(meta.crops.len());
    for name in &meta.crops {
        let cp = dir.join(name);
        crops.push(read_png(&cp).map_err(image_err(&cp))?);
    }
    Ok(FacePool {
        video_id: meta.video_id,
        crops,
        source_frames: meta.source_frames,
        boxes: meta.boxes,
        detections: meta.detections,
    })
}

/// Every invariant violation in `pool`, each naming the offending crop.
pub fn validate_pool(pool: &FacePool) -> Vec<String> {
    let mut out = Vec::new();
    if pool.is_empty() {
        out.push(format!("pool of {} is empty", pool.video_id));
    }
    let mut seen = BTreeSet::new();
    for (i, (&frame, b)) in pool.source_frames.iter().zip(&pool.boxes).enumerate() {
        let name = crop_name(i);
        if !seen.insert(frame) {
            out.push(format!("{name}: source frame {frame} used twice"));
        }
        if b.frame_index != frame {
            out.push(format!(
                "{name}: box frame {} differs from source frame {frame}",
                b.frame_index
            ));
        }
        match pool.detections.iter().find(|d| d.frame_index == frame) {
            None => out.push(format!(
                "{name}: source frame {frame} missing from detection log"
            )),
            Some(d) if d.n_faces != 1 => out.push(format!(
                "{name}: source frame {frame} had {} faces",
                d.n_faces
            )),
            Some(_) => {}
        }
    }
    for (i, c) in pool.crops.iter().enumerate() {
        let (h, w, _) = c.dim();
        if h != w {
            out.push(format!("{}: crop is {w}x{h}, not square", crop_name(i)));
        }
    }
    out
}
