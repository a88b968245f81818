use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterError, AdapterWeights};
use crate::diffusion::{loss_and_gradients, BackboneWeights, DiffusionError};

use crate::tensor::all_finite;

use super::{AdamState, Batch, TrainConfig, TrainError};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub step: usize,
    pub loss: f64,
    pub ref_crop_ids: Vec<String>,
    pub null_text: Vec<bool>,
    pub timesteps: Vec<usize>,
    pub grad_norm: f64,
    /// Seconds spent in the step.
    pub wall_time: f64,
}

/// Forward, backward and one Adam update. On a non-finite loss, gradient or
/// update nothing is modified and the batch is described in the error.
pub fn train_step(
    backbone: &BackboneWeights,
    adapter: &mut AdapterWeights,
    opt: &mut AdamState,
    batch: &Batch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<TrainStepRecord, TrainError> {
    let start = Instant::now();
    let non_finite = |what: &str| TrainError::NonFinite {
        step,
        what: what.to_string(),
        video_ids: batch.video_ids.clone(),
        ref_crop_ids: batch.ref_crop_ids.clone(),
        timesteps: batch.timesteps.clone(),
    };
    let (loss, grads) =
        match loss_and_gradients(backbone, adapter, &batch.examples, cfg.lambda_train) {
            Err(
                DiffusionError::NonFinite(what)
                | DiffusionError::Adapter(AdapterError::NonFinite(what)),
            ) => return Err(non_finite(&what)),
            other => other?,
        };
    let names = adapter.to_named();
    let stray: Vec<String> = grads
        .by_name
        .keys()
        .filter(|k| !names.contains_key(*k))
        .cloned()
        .collect();
    if !stray.is_empty() {
        return Err(TrainError::Isolation(stray));
    }
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(non_finite("gradient"));
    }
    let (mut next, mut next_opt) = (adapter.clone(), opt.clone());
    next_opt.step(&mut next, &grads, cfg.lr)?;
    if !next.to_named().values().all(all_finite) {
        return Err(non_finite("parameter update"));
    }
    (*adapter, *opt) = (next, next_opt);
    Ok(TrainStepRecord {
        step,
        loss,
        ref_crop_ids: batch.ref_crop_ids.clone(),
        null_text: batch.null_text.clone(),
        timesteps: batch.timesteps.clone(),
        grad_norm,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
