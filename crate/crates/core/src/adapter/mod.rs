//! The face adapter: feature extraction, the latent-query face encoder,
//! decoupled cross-attention, identity mixing and checkpoint I/O.

mod attention;
mod checkpoint;
mod encoder;
mod features;
mod mixing;
mod weights;

pub(crate) use attention::{attention_on_tape, decoupled_on_tape, SiteVars};
pub use attention::{
    decoupled_cross_attention, text_cross_attention, AttentionContext, TextAttentionWeights,
};
pub use checkpoint::{load_adapter, load_adapter_unchecked, save_adapter, CHECKPOINT_VERSION};
pub(crate) use encoder::encode_on_tape;
pub use encoder::{encode_face, FaceTokens};
pub use features::{
    extract_image_features, FeatureExtractor, Image, ImageFeatures, PatchPoolExtractor,
    RemoteExtractor,
};
pub use mixing::mix_identities;
pub use weights::{init_adapter, AdapterConfig, AdapterVars, AdapterWeights, ImageKv};

use thiserror::Error;

use crate::archive::ArchiveError;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("feature backend failed for {source_id}: {message}")]
    Backend { source_id: String, message: String },
    #[error("invalid image {source_id}: {message}")]
    InvalidImage { source_id: String, message: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("donor tensors rejected: {}", .offending.join(", "))]
    Donor { offending: Vec<String> },
    #[error(
        "adapter layers {adapter:?} do not match backbone cross-attention layers {backbone:?}"
    )]
    LayerMismatch {
        adapter: Vec<String>,
        backbone: Vec<String>,
    },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("checkpoint backbone hash {found} does not match expected {expected}")]
    HashMismatch { found: String, expected: String },
    #[error("checkpoint truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint i/o: {0}")]
    Io(String),
}

impl From<ArchiveError> for AdapterError {
    fn from(e: ArchiveError) -> Self {
        match e {
            ArchiveError::Truncated { expected, actual } => {
                AdapterError::Truncated { expected, actual }
            }
            ArchiveError::Io { .. } => AdapterError::Io(e.to_string()),
            ArchiveError::BadMagic | ArchiveError::Header(_) => {
                AdapterError::Malformed(e.to_string())
            }
        }
    }
}

pub(crate) fn ensure_finite<D: ndarray::Dimension>(
    what: &str,
    a: &ndarray::Array<f64, D>,
) -> Result<(), AdapterError> {
    if crate::tensor::all_finite(a) {
        Ok(())
    } else {
        Err(AdapterError::NonFinite(what.to_string()))
    }
}
