use ndarray::{Array2, Array4};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{rng_for, Stream};

use super::{
    ConditionBundle, DiffusionError, FaceCondition, LatentVideo, NoisePredictor, NoiseSchedule,
};

/// What the unconditional CFG branch sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncondMode {
    /// Null text and zeroed face tokens.
    #[default]
    NullTextZeroFace,
    /// Null text only; the face condition is kept.
    NullTextOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    pub scale: f64,
    pub uncond: UncondMode,
}

/// Everything the sampler needs besides the model and schedule.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub cond: ConditionBundle,
    pub null_embedding: Array2<f64>,
    pub guidance: Guidance,
    pub steps: usize,
    pub frames: usize,
    /// `(C, H, W)` of each latent frame.
    pub latent_shape: (usize, usize, usize),
    pub seed: u64,
}

impl SampleRequest {
    /// Condition of the unconditional branch.
    pub fn uncond(&self) -> ConditionBundle {
        let mut c = self.cond.with_null_text(&self.null_embedding);
        if self.guidance.uncond == UncondMode::NullTextZeroFace {
            c.face = match c.face {
                Some(FaceCondition::Tokens(t)) => Some(FaceCondition::Tokens(t.zeros_like())),
                // Zero tokens give an exactly zero image branch, the same as none.
                Some(FaceCondition::Features(_)) | None => None,
            };
        }
        c
    }
}

/// Evenly strided timesteps, descending, always ending at 0.
pub fn sampling_timesteps(n_train: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::Argument(
            "sampling needs at least one step".into(),
        ));
    }
    if steps > n_train {
        return Err(DiffusionError::Argument(format!(
            "requested {steps} sampling steps but the schedule has only {n_train}"
        )));
    }
    Ok((0..steps).rev().map(|i| i * n_train / steps).collect())
}

fn combine(eps_u: &Array4<f64>, eps_c: &Array4<f64>, s: f64) -> Array4<f64> {
    // (1 − s)·u + s·c: at s ∈ {0, 1} one term is multiplied by exactly zero.
    let mut out = eps_u * (1.0 - s);
    out.scaled_add(s, eps_c);
    out
}

/// Ancestral DDPM sampling with classifier-free guidance from pure noise.
pub fn cfg_sample(
    req: &SampleRequest,
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
) -> Result<LatentVideo, DiffusionError> {
    let s = req.guidance.scale;
    if !s.is_finite() || s < 0.0 {
        return Err(DiffusionError::Argument(format!(
            "guidance scale must be finite and >= 0, got {s}"
        )));
    }
    if req.frames == 0 {
        return Err(DiffusionError::Argument("frames must be at least 1".into()));
    }
    let timesteps = sampling_timesteps(sched.n_steps(), req.steps)?;
    let (c, h, w) = req.latent_shape;
    let dim = (req.frames, c, h, w);
    let mut rng = rng_for(req.seed, Stream::Sampling, 0);
    let mut x = LatentVideo::new(Array4::from_shape_simple_fn(dim, || {
        StandardNormal.sample(&mut rng)
    }))?;
    let uncond = req.uncond();

    for (i, &t) in timesteps.iter().enumerate() {
        let eps_c = model.predict(&x, t, &req.cond)?;
        let eps_u = model.predict(&x, t, &uncond)?;
        let eps = combine(&eps_u, &eps_c, s);

        let ab_t = sched.alpha_bar(t);
        let ab_p = timesteps.get(i + 1).map_or(1.0, |&p| sched.alpha_bar(p));
        let mut x0 = x.z.clone();
        x0.scaled_add(-(1.0 - ab_t).sqrt(), &eps);
        x0 /= ab_t.sqrt();
        let var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p);
        let sigma = var.max(0.0).sqrt();
        let dir = (1.0 - ab_p - var).max(0.0).sqrt();

        let mut next = x0 * ab_p.sqrt();
        next.scaled_add(dir, &eps);
        if sigma > 0.0 {
            let mut rng = rng_for(req.seed, Stream::Sampling, i as u64 + 1);
            let noise = Array4::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng));
            next.scaled_add(sigma, &noise);
        }
        if !crate::tensor::all_finite(&next) {
            return Err(DiffusionError::NonFinite(format!(
                "latent at sampling step {i} (t={t})"
            )));
        }
        x = LatentVideo {
            z: next,
            frame_rate_hint: x.frame_rate_hint,
        };
    }
    Ok(x)
}
