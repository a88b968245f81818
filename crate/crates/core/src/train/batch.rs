use std::path::Path;

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapter::{extract_image_features, AdapterConfig, ImageFeatures};
use crate::dataset::{read_manifest, read_pool, read_video_dir, sample_random_reference, FacePool};
use crate::diffusion::{
    forward_diffuse, BackboneSpec, ConditionBundle, FaceCondition, LatentVideo, NoiseSchedule,
    TextEncoder, ToyVae, TrainingExample,
};
use crate::tensor::{rng_for, Stream};

use super::{TrainConfig, TrainError};

/// One manifest record, encoded once up front.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub video_id: String,
    pub latent: LatentVideo,
    pub text: Array2<f64>,
    pub pool: FacePool,
    /// Frozen-extractor features of each pool crop, in pool order.
    pub features: Vec<ImageFeatures>,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub records: Vec<TrainRecord>,
    pub null_text: Array2<f64>,
    pub schedule: NoiseSchedule,
}

/// Load clips, captions and pools named by `manifest`. Records with an empty
/// pool or no unified caption are skipped and reported.
pub fn load_training_data(
    manifest: &Path,
    spec: &BackboneSpec,
    adapter: &AdapterConfig,
) -> Result<(TrainData, Vec<String>), TrainError> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?;
    let text = TextEncoder::for_spec(spec);
    let extractor = adapter.extractor();
    let vae = ToyVae::default();
    let want = spec.latent_size * vae.factor;
    let mut out = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    for r in records {
        if r.unified_caption.trim().is_empty() {
            skipped.push(format!("{}: no unified caption", r.video_id));
            continue;
        }
        let pool = read_pool(&root.join(&r.face_pool_path))?;
        if pool.is_empty() {
            skipped.push(format!("{}: empty face pool", r.video_id));
            continue;
        }
        let clip = read_video_dir(&root.join(&r.clip_path))?;
        let (_, h, w, _) = clip.dim();
        if h != want || w != want {
            return Err(TrainError::Data(format!(
                "{}: clip is {h}x{w} but the backbone expects {want}x{want} frames",
                r.video_id
            )));
        }
        let latent = vae.encode(clip.view())?;
        let features = pool
            .crops
            .iter()
            .enumerate()
            .map(|(i, c)| {
                extract_image_features(c.view(), &format!("{}/crop_{i:02}", r.video_id), &extractor)
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(TrainRecord {
            video_id: r.video_id,
            latent,
            text: text.encode(&r.unified_caption),
            pool,
            features,
        });
    }
    for s in &skipped {
        log::warn!("skipping {s}");
    }
    if out.is_empty() {
        return Err(TrainError::Data("no trainable records in manifest".into()));
    }
    Ok((
        TrainData {
            records: out,
            null_text: text.null_embedding(),
            schedule: NoiseSchedule::for_spec(spec)?,
        },
        skipped,
    ))
}

/// Noised samples plus what was drawn to build them.
#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Vec<TrainingExample>,
    pub video_ids: Vec<String>,
    pub ref_crop_ids: Vec<String>,
    pub ref_indices: Vec<usize>,
    pub null_text: Vec<bool>,
    pub face_dropped: Vec<bool>,
    pub timesteps: Vec<usize>,
}

/// Batch for training step `step`. Each sample draws from its own stream
/// per purpose, keyed by `step · batch_size + j`, so any step can be rebuilt
/// without replaying earlier ones.
pub fn make_batch(data: &TrainData, step: usize, cfg: &TrainConfig) -> Result<Batch, TrainError> {
    if data.records.is_empty() {
        return Err(TrainError::Data("no records to sample from".into()));
    }
    let n = cfg.batch_size;
    let mut b = Batch {
        examples: Vec::with_capacity(n),
        video_ids: Vec::with_capacity(n),
        ref_crop_ids: Vec::with_capacity(n),
        ref_indices: Vec::with_capacity(n),
        null_text: Vec::with_capacity(n),
        face_dropped: Vec::with_capacity(n),
        timesteps: Vec::with_capacity(n),
    };
    for j in 0..n {
        let key = (step * n + j) as u64;
        let rng = |s| rng_for(cfg.seed, s, key);
        let rec = &data.records[rng(Stream::RecordPick).random_range(0..data.records.len())];
        let t = rng(Stream::Timestep).random_range(0..data.schedule.n_steps());
        let mut noise_rng = rng(Stream::Noise);
        let eps = Array4::from_shape_simple_fn(rec.latent.z.dim(), || {
            StandardNormal.sample(&mut noise_rng)
        });
        let (ref_idx, _) = sample_random_reference(&rec.pool, &mut rng(Stream::Reference))?;
        let null = rng(Stream::TextDropout).random_bool(cfg.null_text_prob);
        let drop_face = rng(Stream::FaceDropout).random_bool(cfg.face_drop_prob);

        let z_t = forward_diffuse(&rec.latent, t, &eps, &data.schedule)?;
        let text = if null {
            data.null_text.clone()
        } else {
            rec.text.clone()
        };
        let face = (!drop_face).then(|| FaceCondition::Features(rec.features[ref_idx].clone()));
        let mut cond = ConditionBundle::new(text, face);
        cond.null_text = null;
        b.examples.push(TrainingExample { z_t, t, eps, cond });
        b.video_ids.push(rec.video_id.clone());
        b.ref_crop_ids
            .push(format!("{}/crop_{ref_idx:02}", rec.video_id));
        b.ref_indices.push(ref_idx);
        b.null_text.push(null);
        b.face_dropped.push(drop_face);
        b.timesteps.push(t);
    }
    Ok(b)
}
