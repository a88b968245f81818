//! Face adapter for a toy text-to-video diffusion backbone, plus the
//! dataset, captioning and training machinery around it.

pub mod adapter;
pub mod archive;
pub mod caption;
pub mod dataset;
pub mod diffusion;
pub mod graph;
pub mod imageio;
pub mod tensor;
pub mod train;

pub use adapter::{AdapterConfig, AdapterError, AdapterWeights, FaceTokens, ImageFeatures};
pub use diffusion::{
    BackboneSpec, BackboneWeights, ConditionBundle, GenerationConfig, LatentVideo,
};
