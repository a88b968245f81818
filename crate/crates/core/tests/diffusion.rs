use idkit_core::adapter::{init_adapter, AdapterConfig, FaceTokens};
use idkit_core::diffusion::{
    adapter_hook_sites, cfg_sample, decode_latent, forward_diffuse, predict_noise, training_loss,
    BackboneSpec, BackboneWeights, ConditionBundle, DiffusionError, FaceCondition, Guidance,
    LatentVideo, LayerKind, LevelSpec, NoisePredictor, NoiseSchedule, SampleRequest, ToyVae,
    TrainingExample, UncondMode,
};
use idkit_core::tensor::{eye, rng_for, Stream};
use ndarray::{Array2, Array4};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal4(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = rng_for(seed, Stream::Noise, 99);
    Array4::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng))
}

fn normal2(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, Stream::Noise, 98);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

fn single_layer_spec() -> BackboneSpec {
    BackboneSpec {
        latent_channels: 4,
        latent_size: 8,
        levels: vec![LevelSpec { width: 4 }],
        temporal_level: Some(0),
        d_ctx: 4,
        n_text: 3,
        d_time: 4,
        n_steps: 50,
        beta_start: 1e-3,
        beta_end: 5e-2,
        weight_seed: 5,
    }
}

fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    (0..d)
        .map(|j| {
            let k = (j % half) as f64;
            let a = pos * (-(10_000f64.ln()) * k / half as f64).exp();
            if j < half {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

fn softmax_mix(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let scale = (q.len() as f64).sqrt();
    let s: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / scale)
        .collect();
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in e.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w / z * x;
        }
    }
    out
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// Straight-line forward of the one-level backbone with every projection
/// set to the identity: no matrices, no tape.
fn oracle(
    z: &Array4<f64>,
    t: usize,
    alpha_bar: f64,
    text: &Array2<f64>,
    face: Option<(&Array2<f64>, f64)>,
) -> Array4<f64> {
    let (frames, c, size, _) = z.dim();
    let te = sinusoid(t as f64, c);
    let silu = |x: f64| x / (1.0 + (-x).exp());
    let text = rows(text);
    let face = face.map(|(f, l)| (rows(f), l));
    let mut h = vec![vec![vec![0.0; c]; size * size]; frames];
    for f in 0..frames {
        for p in 0..size * size {
            let (y, x) = (p / size, p % size);
            let v: Vec<f64> = (0..c).map(|ch| silu(z[[f, ch, y, x]] + te[ch])).collect();
            let mut attn = softmax_mix(&v, &text, &text);
            if let Some((img, lambda)) = &face {
                let extra = softmax_mix(&v, img, img);
                for (a, e) in attn.iter_mut().zip(extra) {
                    *a += lambda * e;
                }
            }
            h[f][p] = v.iter().zip(&attn).map(|(a, b)| a + b).collect();
        }
    }
    let mut out = Array4::zeros(z.dim());
    for p in 0..size * size {
        let hp: Vec<Vec<f64>> = (0..frames)
            .map(|f| {
                let pe = sinusoid(f as f64, c);
                h[f][p].iter().zip(&pe).map(|(a, b)| a + b).collect()
            })
            .collect();
        for f in 0..frames {
            let mixed = softmax_mix(&hp[f], &hp, &hp);
            let (y, x) = (p / size, p % size);
            for ch in 0..c {
                out[[f, ch, y, x]] =
                    h[f][p][ch] + mixed[ch] + (1.0 - alpha_bar).sqrt() * z[[f, ch, y, x]];
            }
        }
    }
    out
}

fn close(a: &Array4<f64>, b: &Array4<f64>, tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn identity_single_layer_matches_straight_line_forward() {
    let spec = single_layer_spec();
    let backbone = BackboneWeights::identity(spec.clone()).unwrap();
    let sched = NoiseSchedule::for_spec(&spec).unwrap();
    let z = normal4((2, 4, 8, 8), 1);
    let text = normal2(3, 4, 2);
    for t in [0, 17, 49] {
        let latent = LatentVideo::new(z.clone()).unwrap();
        let cond = ConditionBundle::new(text.clone(), None);
        let got = predict_noise(&backbone, None, &latent, t, &cond, 1.0).unwrap();
        let want = oracle(&z, t, sched.alpha_bar(t), &text, None);
        assert!(close(&got, &want, 1e-10), "t={t}");
    }

    let mut adapter = init_adapter(&spec, AdapterConfig::for_backbone(&spec), 0, None).unwrap();
    for kv in adapter.layers.values_mut() {
        kv.to_k_img = eye(4, 4);
        kv.to_v_img = eye(4, 4);
    }
    let face = normal2(5, 4, 3);
    let cond = ConditionBundle::new(
        text.clone(),
        Some(FaceCondition::Tokens(FaceTokens {
            tokens: face.clone(),
            provenance: vec![],
        })),
    );
    let latent = LatentVideo::new(z.clone()).unwrap();
    let got = predict_noise(&backbone, Some(&adapter), &latent, 9, &cond, 0.7).unwrap();
    let want = oracle(&z, 9, sched.alpha_bar(9), &text, Some((&face, 0.7)));
    assert!(close(&got, &want, 1e-10));
}

#[test]
fn alpha_bar_three_quarters_gives_half() {
    // beta = 0.25 at the only step.
    let sched = NoiseSchedule::from_betas(vec![0.25]).unwrap();
    let z = LatentVideo::new(Array4::zeros((1, 3, 2, 2))).unwrap();
    let out = forward_diffuse(&z, 0, &Array4::ones((1, 3, 2, 2)), &sched).unwrap();
    assert!(out.z.iter().all(|&v| (v - 0.5).abs() < 1e-15));
}

struct Const(Array4<f64>);

impl NoisePredictor for Const {
    fn predict(
        &self,
        _: &LatentVideo,
        _: usize,
        _: &ConditionBundle,
    ) -> Result<Array4<f64>, DiffusionError> {
        Ok(self.0.clone())
    }
}

struct Echo;

impl NoisePredictor for Echo {
    fn predict(
        &self,
        z: &LatentVideo,
        _: usize,
        _: &ConditionBundle,
    ) -> Result<Array4<f64>, DiffusionError> {
        Ok(z.z.clone())
    }
}

#[test]
fn random_batch_loss_is_hand_summed_mean() {
    let dim = (2, 3, 2, 2);
    let batch: Vec<TrainingExample> = (0..3)
        .map(|i| TrainingExample {
            z_t: LatentVideo::new(normal4(dim, 10 + i)).unwrap(),
            t: 0,
            eps: normal4(dim, 20 + i),
            cond: ConditionBundle::new(Array2::zeros((1, 4)), None),
        })
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for ex in &batch {
        for (a, b) in ex.z_t.z.iter().zip(&ex.eps) {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    let got = training_loss(&batch, &Echo).unwrap();
    assert!((got - sum / count as f64).abs() < 1e-12);
}

#[test]
fn loss_ignores_sample_order() {
    let dim = (1, 3, 2, 2);
    let mut batch: Vec<TrainingExample> = (0..4)
        .map(|i| TrainingExample {
            z_t: LatentVideo::new(normal4(dim, 30 + i)).unwrap(),
            t: 0,
            eps: normal4(dim, 40 + i),
            cond: ConditionBundle::new(Array2::zeros((1, 4)), None),
        })
        .collect();
    let a = training_loss(&batch, &Echo).unwrap();
    batch.reverse();
    let b = training_loss(&batch, &Echo).unwrap();
    assert!((a - b).abs() < 1e-14);
}

#[test]
fn two_step_sampler_follows_the_update_rule() {
    let (b0, b1) = (0.1, 0.3);
    let sched = NoiseSchedule::from_betas(vec![b0, b1]).unwrap();
    let e = 0.4;
    let dim = (1, 3, 2, 2);
    let req = SampleRequest {
        cond: ConditionBundle::new(Array2::zeros((1, 2)), None),
        null_embedding: Array2::zeros((1, 2)),
        guidance: Guidance {
            scale: 3.0,
            uncond: UncondMode::NullTextZeroFace,
        },
        steps: 2,
        frames: 1,
        latent_shape: (3, 2, 2),
        seed: 11,
    };
    let got = cfg_sample(&req, &Const(Array4::from_elem(dim, e)), &sched).unwrap();

    let (ab1, ab0) = ((1.0 - b0) * (1.0 - b1), 1.0 - b0);
    let mut r0 = rng_for(11, Stream::Sampling, 0);
    let mut r1 = rng_for(11, Stream::Sampling, 1);
    let x_t: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut r0)).collect();
    let n1: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut r1)).collect();
    let var = (1.0 - ab0) / (1.0 - ab1) * (1.0 - ab1 / ab0);
    for i in 0..12 {
        let x1 = ab0.sqrt() * (x_t[i] - (1.0 - ab1).sqrt() * e) / ab1.sqrt()
            + (1.0 - ab0 - var).sqrt() * e
            + var.sqrt() * n1[i];
        let x0 = (x1 - (1.0 - ab0).sqrt() * e) / ab0.sqrt();
        let g = got.z.as_slice().unwrap()[i];
        assert!((g - x0).abs() < 1e-12, "{g} vs {x0}");
    }
}

#[test]
fn vae_round_trip_error_is_tiny_on_random_in_range_latents() {
    let vae = ToyVae::default();
    let mut rng = rng_for(3, Stream::Noise, 0);
    // Latents on the 8-bit grid that a decoded frame can represent.
    let z = Array4::from_shape_simple_fn((2, 3, 4, 4), || {
        rng.random_range(0..=255) as f64 / 127.5 - 1.0
    });
    let latent = LatentVideo::new(z.clone()).unwrap();
    let back = vae.encode(decode_latent(&latent).view()).unwrap();
    let err = back
        .z
        .iter()
        .zip(&z)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-6, "max error {err}");
}

#[test]
fn adapter_hooks_only_touch_cross_attention() {
    let spec = BackboneSpec::ci();
    let adapter = init_adapter(&spec, AdapterConfig::for_backbone(&spec), 0, None).unwrap();
    let sites = adapter_hook_sites(&spec, &adapter);
    let cross: Vec<String> = spec
        .layers()
        .into_iter()
        .filter(|(_, k)| *k == LayerKind::CrossAttention)
        .map(|(id, _)| id)
        .collect();
    assert_eq!(sites, cross);
    assert!(spec.layers().iter().any(|(_, k)| *k == LayerKind::Temporal));
    assert!(sites.iter().all(|s| !s.contains("temporal")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lambda_zero_prediction_equals_frozen_backbone(seed in 0u64..1000, t in 0usize..1000) {
        let spec = BackboneSpec::ci();
        let backbone = BackboneWeights::new(spec.clone()).unwrap();
        let mut adapter = init_adapter(&spec, AdapterConfig::for_backbone(&spec), seed, None).unwrap();
        for kv in adapter.layers.values_mut() {
            kv.to_v_img = normal2(kv.to_v_img.nrows(), kv.to_v_img.ncols(), seed);
        }
        let z = LatentVideo::new(normal4((2, 3, 8, 8), seed)).unwrap();
        let text = normal2(8, 16, seed + 1);
        let face = FaceCondition::Tokens(FaceTokens { tokens: normal2(16, 16, seed + 2), provenance: vec![] });
        let with = predict_noise(&backbone, Some(&adapter), &z, t, &ConditionBundle::new(text.clone(), Some(face)), 0.0).unwrap();
        let without = predict_noise(&backbone, None, &z, t, &ConditionBundle::new(text, None), 0.0).unwrap();
        prop_assert_eq!(with, without);
    }

    #[test]
    fn forward_process_is_variance_preserving(t in 0usize..1000) {
        let sched = NoiseSchedule::for_spec(&BackboneSpec::ci()).unwrap();
        let n = 10_000;
        let z = LatentVideo::new(normal4((1, 1, 100, 100), t as u64)).unwrap();
        let eps = normal4((1, 1, 100, 100), 5000 + t as u64);
        let zt = forward_diffuse(&z, t, &eps, &sched).unwrap();
        let mean = zt.z.sum() / n as f64;
        let var = zt.z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!((var - 1.0).abs() < 0.05, "var {}", var);
    }
}
