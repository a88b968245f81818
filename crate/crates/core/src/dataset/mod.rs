//! ID-oriented dataset construction: clip and resize, face detection,
//! per-video face pools, multi-face filtering and the JSONL manifest.

mod build;
mod detect;
mod filter;
mod frames;
mod manifest;
mod pool;
mod synth;

pub use build::{build_dataset, build_dataset_with, BuildConfig, BuildSummary};
pub use detect::{detect_faces, DiskDetector, FaceBox, FaceDetector};
pub use filter::{filter_multi_face_videos, DropReason, FilterCandidate, FilterReport};
pub use frames::{
    clip_and_resize, clip_window, read_video_dir, resize_frame, write_video_dir, ClipConfig,
    RawVideo,
};
pub use manifest::{read_manifest, validate_record, write_manifest, DatasetRecord};
pub use pool::{
    build_face_pool, collect_face_pool, read_pool, sample_random_reference, validate_pool,
    write_pool, FacePool, FrameDetection, PoolConfig,
};
pub use synth::{
    generate_synthetic_corpus, write_corpus, CorpusSpec, Disk, GroundTruth, PartialMultiFace,
    SyntheticCorpus, VideoTruth,
};

use std::path::PathBuf;

use thiserror::Error;

/// Env var naming the dataset root when no flag is given.
pub const DATA_ROOT_ENV: &str = "ID_KIT_DATA_ROOT";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("video {video_id}: {frames} frames is shorter than clip length {clip_length}")]
    TooShort {
        video_id: String,
        frames: usize,
        clip_length: usize,
    },
    #[error("video {video_id}: no single-face frame within {attempts} attempts")]
    EmptyPool { video_id: String, attempts: usize },
    #[error("detector {detector} failed on frame {frame_index}: {message}")]
    Detector {
        detector: String,
        frame_index: usize,
        message: String,
    },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid pool {path}: {message}")]
    Pool { path: PathBuf, message: String },
    #[error("invalid corpus spec field `{field}`: {message}")]
    Spec { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DatasetError {
    let path = path.into();
    move |source| DatasetError::Io { path, source }
}

pub(crate) fn image_err(
    path: impl Into<PathBuf>,
) -> impl FnOnce(image::ImageError) -> DatasetError {
    let path = path.into();
    move |source| DatasetError::Image { path, source }
}

pub(crate) fn json_err(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> DatasetError {
    let path = path.into();
    move |source| DatasetError::Json { path, source }
}
