use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{rng_for, Stream};

use super::frames::{write_video_dir, RawVideo};
use super::{io_err, json_err, DatasetError};

/// A second face visible only in frames `[start, end)` of one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialMultiFace {
    pub video: usize,
    pub start: usize,
    pub end: usize,
}

/// What the synthetic corpus should contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_videos: usize,
    /// Videos showing two people in every frame.
    #[serde(default)]
    pub multi_face_videos: Vec<usize>,
    #[serde(default)]
    pub partial_multi_face: Vec<PartialMultiFace>,
    /// Videos with no face at all.
    #[serde(default)]
    pub blank_videos: Vec<usize>,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Face radius as a fraction of the shorter frame side.
    #[serde(default = "default_radius")]
    pub face_radius: f64,
}

fn default_radius() -> f64 {
    0.15
}

impl CorpusSpec {
    /// `n_videos` videos at the CI source resolution, the last `n_multi` of
    /// them two-person.
    pub fn simple(n_videos: usize, n_multi: usize) -> Self {
        Self {
            n_videos,
            multi_face_videos: (n_videos.saturating_sub(n_multi)..n_videos).collect(),
            partial_multi_face: Vec::new(),
            blank_videos: Vec::new(),
            frames: 16,
            width: 96,
            height: 64,
            face_radius: default_radius(),
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |field: &str, message: String| {
            Err(DatasetError::Spec {
                field: field.into(),
                message,
            })
        };
        if self.frames == 0 {
            return bad("frames", "must be at least 1".into());
        }
        if self.width < 16 || self.height < 16 {
            return bad(
                if self.width < 16 { "width" } else { "height" },
                format!(
                    "frames must be at least 16x16, got {}x{}",
                    self.width, self.height
                ),
            );
        }
        if !(self.face_radius > 0.0 && self.face_radius <= 0.2) {
            return bad(
                "face_radius",
                format!("must be in (0, 0.2], got {}", self.face_radius),
            );
        }
        for (field, list) in [
            ("multi_face_videos", &self.multi_face_videos),
            ("blank_videos", &self.blank_videos),
        ] {
            if let Some(v) = list.iter().find(|&&v| v >= self.n_videos) {
                return bad(
                    field,
                    format!("video index {v} out of range for {} videos", self.n_videos),
                );
            }
        }
        if let Some(v) = self
            .blank_videos
            .iter()
            .find(|v| self.multi_face_videos.contains(v))
        {
            return bad(
                "blank_videos",
                format!("video {v} is also listed as multi-face"),
            );
        }
        for p in &self.partial_multi_face {
            if p.video >= self.n_videos {
                return bad(
                    "partial_multi_face",
                    format!("video index {} out of range", p.video),
                );
            }
            if !(p.start < p.end && p.end <= self.frames) {
                return bad(
                    "partial_multi_face",
                    format!(
                        "range [{}, {}) invalid for {} frames",
                        p.start, p.end, self.frames
                    ),
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTruth {
    pub video_id: String,
    pub identity_color: [f32; 3],
    /// Two faces in every frame.
    pub two_person: bool,
    pub blank: bool,
    /// Frames showing two or more faces.
    pub multi_face_frames: Vec<usize>,
    /// Planted disks per frame, the identity face first.
    pub faces: Vec<Vec<Disk>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub spec: CorpusSpec,
    pub videos: Vec<VideoTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub videos: Vec<RawVideo>,
    pub truth: GroundTruth,
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let rgb = match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|c| c as f32)
}

fn identity_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    hsv(
        rng.random(),
        rng.random_range(0.4..0.8),
        rng.random_range(0.85..1.0),
    )
}

/// Sinusoidal trajectory of one face centre.
struct Track {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    phase: f64,
    period: f64,
}

impl Track {
    fn at(&self, t: usize) -> (f64, f64) {
        let a = TAU * t as f64 / self.period + self.phase;
        (self.cx + self.ax * a.sin(), self.cy + self.ay * a.cos())
    }
}

fn track(rng: &mut ChaCha8Rng, x_lo: f64, x_hi: f64, h: f64, r: f64) -> Track {
    let ax = rng.random_range(0.0..0.04) * (x_hi - x_lo + 2.0 * r);
    let ay = rng.random_range(0.0..0.04) * h;
    let cx_lo = x_lo + r + ax + 1.0;
    let cx_hi = (x_hi - r - ax - 1.0).max(cx_lo);
    let cy_lo = r + ay + 1.0;
    let cy_hi = (h - r - ay - 1.0).max(cy_lo);
    Track {
        cx: rng.random_range(cx_lo..=cx_hi),
        cy: rng.random_range(cy_lo..=cy_hi),
        ax,
        ay,
        phase: rng.random_range(0.0..TAU),
        period: rng.random_range(8.0..24.0),
    }
}

fn q8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Dark videos with bright, identity-coloured, radially shaded "face"
/// disks moving on smooth tracks. Pixel values lie on the 8-bit grid so
/// PNG storage is lossless.
pub fn generate_synthetic_corpus(
    spec: &CorpusSpec,
    seed: u64,
) -> Result<SyntheticCorpus, DatasetError> {
    spec.validate()?;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let r = spec.face_radius * w.min(h);
    let mut videos = Vec::with_capacity(spec.n_videos);
    let mut truths = Vec::with_capacity(spec.n_videos);
    for v in 0..spec.n_videos {
        let mut rng = rng_for(seed, Stream::Corpus, v as u64);
        let video_id = format!("vid_{v:03}");
        let color = identity_color(&mut rng);
        let other = identity_color(&mut rng);
        let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.25));
        let grad: f32 = rng.random_range(-0.05..0.05);
        let blank = spec.blank_videos.contains(&v);
        let two_person = spec.multi_face_videos.contains(&v);
        let partial = spec.partial_multi_face.iter().find(|p| p.video == v);
        let needs_second = two_person || partial.is_some();
        // Two-face videos keep each person in their own half.
        let (main, second) = if needs_second {
            (
                track(&mut rng, 0.0, w / 2.0, h, r),
                Some(track(&mut rng, w / 2.0, w, h, r)),
            )
        } else {
            (track(&mut rng, 0.0, w, h, r), None)
        };

        let mut faces = Vec::with_capacity(spec.frames);
        let mut multi = Vec::new();
        for t in 0..spec.frames {
            let mut disks = Vec::new();
            if !blank {
                let (cx, cy) = main.at(t);
                disks.push((Disk { cx, cy, r }, color));
                let second_on =
                    two_person || partial.is_some_and(|p| (p.start..p.end).contains(&t));
                if let (Some(s), true) = (&second, second_on) {
                    let (cx, cy) = s.at(t);
                    disks.push((Disk { cx, cy, r }, other));
                }
            }
            if disks.len() >= 2 {
                multi.push(t);
            }
            faces.push(disks);
        }

        let frames =
            Array4::from_shape_fn((spec.frames, spec.height, spec.width, 3), |(t, y, x, c)| {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                for (d, col) in &faces[t] {
                    let d2 = ((px - d.cx).powi(2) + (py - d.cy).powi(2)) / (d.r * d.r);
                    if d2 <= 1.0 {
                        return q8(col[c] * (1.0 - 0.2 * d2 as f32));
                    }
                }
                q8(bg[c] + grad * (py / h) as f32)
            });
        videos.push(RawVideo::new(video_id.clone(), frames)?);
        truths.push(VideoTruth {
            video_id,
            identity_color: color,
            two_person,
            blank,
            multi_face_frames: multi,
            faces: faces
                .into_iter()
                .map(|f| f.into_iter().map(|(d, _)| d).collect())
                .collect(),
        });
    }
    Ok(SyntheticCorpus {
        videos,
        truth: GroundTruth {
            seed,
            spec: spec.clone(),
            videos: truths,
        },
    })
}

/// One frame directory per video plus `ground_truth.json` under `out`.
pub fn write_corpus(corpus: &SyntheticCorpus, out: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    for v in &corpus.videos {
        write_video_dir(&out.join(&v.video_id), &v.frames)?;
    }
    let p = out.join("ground_truth.json");
    let text = serde_json::to_string_pretty(&corpus.truth).map_err(json_err(&p))?;
    fs::write(&p, text).map_err(io_err(&p))
}
