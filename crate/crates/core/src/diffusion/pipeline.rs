use ndarray::{Array3, Array4};

use crate::adapter::{
    encode_face, extract_image_features, mix_identities, AdapterWeights, FaceTokens,
};

use super::{
    cfg_sample, decode_latent, BackboneWeights, ConditionBundle, Denoiser, DiffusionError,
    FaceCondition, GenerationConfig, Guidance, LatentVideo, SampleRequest, TextEncoder,
};

#[derive(Debug, Clone)]
pub struct GeneratedVideo {
    pub latent: LatentVideo,
    /// `[T × H × W × 3]` in `[0, 1]`.
    pub frames: Array4<f32>,
    /// Identity actually injected, after mixing.
    pub face_tokens: Option<FaceTokens>,
}

/// Face tokens for `refs` (aligned with `cfg.reference_images`), mixed when
/// there are several.
pub fn reference_tokens(
    adapter: &AdapterWeights,
    cfg: &GenerationConfig,
    refs: &[Array3<f32>],
) -> Result<Option<FaceTokens>, DiffusionError> {
    if refs.is_empty() {
        return Ok(None);
    }
    let extractor = adapter.config.extractor();
    let tokens = refs
        .iter()
        .zip(&cfg.reference_images)
        .map(|(img, id)| {
            let f = extract_image_features(img.view(), id, &extractor)?;
            encode_face(&f, adapter)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if tokens.len() == 1 {
        return Ok(tokens.into_iter().next());
    }
    Ok(Some(mix_identities(&tokens, &cfg.resolved_weights())?))
}

/// Text (and optionally identity) conditioned video from pure noise.
pub fn generate_video(
    backbone: &BackboneWeights,
    adapter: Option<&AdapterWeights>,
    cfg: &GenerationConfig,
    refs: &[Array3<f32>],
) -> Result<GeneratedVideo, DiffusionError> {
    cfg.validate()?;
    if refs.len() != cfg.reference_images.len() {
        return Err(DiffusionError::Argument(format!(
            "{} reference images loaded for {} listed",
            refs.len(),
            cfg.reference_images.len()
        )));
    }
    let face_tokens = match (adapter, refs.is_empty()) {
        (_, true) => None,
        (Some(a), false) => reference_tokens(a, cfg, refs)?,
        (None, false) => {
            return Err(DiffusionError::Config(
                "reference images given without an adapter".into(),
            ))
        }
    };
    let spec = backbone.spec();
    let text = TextEncoder::for_spec(spec);
    let req = SampleRequest {
        cond: ConditionBundle::new(
            text.encode(&cfg.prompt),
            face_tokens.clone().map(FaceCondition::Tokens),
        ),
        null_embedding: text.null_embedding(),
        guidance: Guidance {
            scale: cfg.guidance_scale,
            uncond: cfg.uncond_mode,
        },
        steps: cfg.steps,
        frames: cfg.frames,
        latent_shape: (spec.latent_channels, spec.latent_size, spec.latent_size),
        seed: cfg.seed,
    };
    let model = Denoiser {
        backbone,
        adapter,
        lambda: cfg.lambda,
    };
    let latent = cfg_sample(&req, &model, backbone.schedule())?;
    Ok(GeneratedVideo {
        frames: decode_latent(&latent),
        latent,
        face_tokens,
    })
}
