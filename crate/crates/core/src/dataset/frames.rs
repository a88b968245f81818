use std::fs;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgb, Rgb32FImage};
use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imageio::{read_png, write_png};

use super::{image_err, io_err, DatasetError};

/// A decoded source video, `[N × H × W × 3]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVideo {
    pub frames: Array4<f32>,
    pub video_id: String,
}

impl RawVideo {
    pub fn new(video_id: impl Into<String>, frames: Array4<f32>) -> Result<Self, DatasetError> {
        let video_id = video_id.into();
        let (n, h, w, c) = frames.dim();
        if n == 0 || h == 0 || w == 0 || c != 3 {
            return Err(DatasetError::InvalidFrame(format!(
                "video {video_id}: expected [N, H, W, 3] with N, H, W > 0, got {:?}",
                frames.dim()
            )));
        }
        if let Some(v) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DatasetError::InvalidFrame(format!(
                "video {video_id}: pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { frames, video_id })
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub clip_length: usize,
    pub size: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            clip_length: 16,
            size: 512,
        }
    }
}

impl ClipConfig {
    pub fn ci() -> Self {
        Self {
            clip_length: 8,
            size: 64,
        }
    }
}

/// Start of a contiguous `clip_length` window, uniform over valid offsets.
pub fn clip_window<R: Rng>(n_frames: usize, clip_length: usize, rng: &mut R) -> Option<usize> {
    if clip_length == 0 || n_frames < clip_length {
        return None;
    }
    Some(rng.random_range(0..=n_frames - clip_length))
}

/// Center-crop to a square (the longer side loses its edges), then resize.
pub fn resize_frame(frame: ArrayView3<'_, f32>, size: usize) -> Array3<f32> {
    let (h, w, _) = frame.dim();
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let square = frame.slice(s![y0..y0 + side, x0..x0 + side, ..]);
    if side == size {
        return square.to_owned();
    }
    let img = Rgb32FImage::from_fn(side as u32, side as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([square[[y, x, 0]], square[[y, x, 1]], square[[y, x, 2]]])
    });
    let out = imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        out.get_pixel(x as u32, y as u32)[c].clamp(0.0, 1.0)
    })
}

/// Exactly `clip_length` contiguous frames at a random offset, each
/// center-cropped and resized to `size × size`.
pub fn clip_and_resize<R: Rng>(
    video: &RawVideo,
    cfg: ClipConfig,
    rng: &mut R,
) -> Result<Array4<f32>, DatasetError> {
    if cfg.size == 0 {
        return Err(DatasetError::Argument("clip size must be positive".into()));
    }
    let start =
        clip_window(video.len(), cfg.clip_length, rng).ok_or_else(|| DatasetError::TooShort {
            video_id: video.video_id.clone(),
            frames: video.len(),
            clip_length: cfg.clip_length,
        })?;
    let mut out = Array4::zeros((cfg.clip_length, cfg.size, cfg.size, 3));
    for i in 0..cfg.clip_length {
        out.index_axis_mut(Axis(0), i)
            .assign(&resize_frame(video.frame(start + i), cfg.size));
    }
    Ok(out)
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.png")
}

/// Frames as numbered PNGs in `dir`.
pub fn write_video_dir(dir: &Path, frames: &Array4<f32>) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, f) in frames.outer_iter().enumerate() {
        let p = dir.join(frame_name(i));
        write_png(&p, f).map_err(image_err(&p))?;
    }
    Ok(())
}

pub fn read_video_dir(dir: &Path) -> Result<Array4<f32>, DatasetError> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("frame_") && n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(DatasetError::InvalidFrame(format!(
            "{} holds no frames",
            dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(names.len());
    for n in &names {
        let p = dir.join(n);
        frames.push(read_png(&p).map_err(image_err(&p))?);
    }
    let dim = frames[0].dim();
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dim() != dim) {
        return Err(DatasetError::InvalidFrame(format!(
            "{}: frame {i} is {:?}, frame 0 is {dim:?}",
            dir.display(),
            f.dim()
        )));
    }
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("equal frame shapes"))
}
