//! Adapter training: batches from the built dataset, Adam over adapter
//! tensors only, checkpoints and resumable metrics.

mod adam;
mod batch;
mod config;
mod run;
mod step;

pub use adam::AdamState;
pub use batch::{load_training_data, make_batch, Batch, TrainData, TrainRecord};
pub use config::TrainConfig;
pub use run::{
    adapter_checkpoint_path, latest_checkpoint, optimizer_checkpoint_path, train_loop, LoopOptions,
    TrainOutcome,
};
pub use step::{train_step, TrainStepRecord};

use std::path::PathBuf;

use thiserror::Error;

use crate::adapter::AdapterError;
use crate::archive::ArchiveError;
use crate::dataset::DatasetError;
use crate::diffusion::DiffusionError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("gradient reached non-adapter tensors: {}", .0.join(", "))]
    Isolation(Vec<String>),
    #[error("step {step}: non-finite {what} (videos {video_ids:?}, timesteps {timesteps:?})")]
    NonFinite {
        step: usize,
        what: String,
        video_ids: Vec<String>,
        ref_crop_ids: Vec<String>,
        timesteps: Vec<usize>,
    },
    #[error("giving up after {0} non-finite steps")]
    TooManyNonFinite(usize),
    #[error("backbone weights changed during training ({before} -> {after})")]
    BackboneChanged { before: String, after: String },
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TrainError {
    let path = path.into();
    move |source| TrainError::Io { path, source }
}
