use ndarray::Array4;

use super::{BackboneSpec, DiffusionError, LatentVideo};

/// Variance-preserving forward-process coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::Argument(
                "schedule needs at least one step".into(),
            ));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::Argument(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Betas linearly spaced from `start` to `end` inclusive.
    pub fn linear(n_steps: usize, start: f64, end: f64) -> Result<Self, DiffusionError> {
        let betas = if n_steps == 1 {
            vec![start]
        } else {
            (0..n_steps)
                .map(|i| start + (end - start) * i as f64 / (n_steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn for_spec(spec: &BackboneSpec) -> Result<Self, DiffusionError> {
        Self::linear(spec.n_steps, spec.beta_start, spec.beta_end)
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }
}

/// `z_t = √ᾱ_t · z + √(1 − ᾱ_t) · ε`
pub fn forward_diffuse(
    z: &LatentVideo,
    t: usize,
    eps: &Array4<f64>,
    sched: &NoiseSchedule,
) -> Result<LatentVideo, DiffusionError> {
    if eps.dim() != z.z.dim() {
        return Err(DiffusionError::Shape {
            context: "noise vs latent".into(),
            expected: format!("{:?}", z.z.dim()),
            actual: format!("{:?}", eps.dim()),
        });
    }
    if t >= sched.n_steps() {
        return Err(DiffusionError::Argument(format!(
            "timestep {t} outside [0, {})",
            sched.n_steps()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = &z.z * a;
    out.scaled_add(b, eps);
    Ok(LatentVideo {
        z: out,
        frame_rate_hint: z.frame_rate_hint,
    })
}
