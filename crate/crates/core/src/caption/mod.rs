//! Decoupled captioning: an attribute caption of the median frame, an
//! action caption of the whole clip, and an LLM merge of the two.

mod client;
mod orchestrate;
mod template;
mod types;

pub use client::{
    client_for, CallError, CaptionClient, HttpCaptionClient, MockCaptionClient, MockKind,
    WireInput, WireRequest, WireResponse,
};
pub use orchestrate::{
    action_caption, attribute_caption, caption_clip, caption_corpus, median_frame_index,
    subsample_indices, unify_captions, CaptionOptions, CaptionServices, CaptionSummary, Captioner,
    QuarantineEntry, StageOutput,
};
pub use template::{parse_unify_prompt, render_unify_prompt, TEMPLATE_VERSION, UNIFY_TEMPLATE};
pub use types::{
    CaptionProvenance, CaptionTriple, CaptionerEndpoint, EndpointConfig, RetryPolicy, StageRetries,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::DatasetError;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("caption config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{video_id} {stage}: {source} (after {attempts} attempts)")]
    Call {
        video_id: String,
        stage: String,
        attempts: u32,
        #[source]
        source: CallError,
    },
    #[error("{video_id} {stage}: empty model response (after {attempts} attempts)")]
    Content {
        video_id: String,
        stage: String,
        attempts: u32,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
