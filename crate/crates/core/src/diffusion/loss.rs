use ndarray::Array4;
use rayon::prelude::*;

use crate::adapter::AdapterWeights;
use crate::graph::{Gradients, Tape};
use crate::tensor::all_finite;

use super::backbone::{face_tokens_on_tape, tokens_from_latent, AdapterBinding};
use super::{BackboneWeights, ConditionBundle, DiffusionError, LatentVideo, NoisePredictor};

/// One `(z_t, t, ε, condition)` sample; `z_t` is already noised.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub z_t: LatentVideo,
    pub t: usize,
    pub eps: Array4<f64>,
    pub cond: ConditionBundle,
}

/// `Σ (a − b)² / len`
pub fn mean_squared_error(a: &Array4<f64>, b: &Array4<f64>) -> Result<f64, DiffusionError> {
    if a.dim() != b.dim() {
        return Err(DiffusionError::Shape {
            context: "prediction vs noise".into(),
            expected: format!("{:?}", b.dim()),
            actual: format!("{:?}", a.dim()),
        });
    }
    Ok(sum_sq(a, b) / a.len() as f64)
}

fn sum_sq(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_batch(batch: &[TrainingExample]) -> Result<usize, DiffusionError> {
    if batch.is_empty() {
        return Err(DiffusionError::Argument("training batch is empty".into()));
    }
    let mut total = 0;
    for ex in batch {
        if ex.eps.dim() != ex.z_t.z.dim() {
            return Err(DiffusionError::Shape {
                context: "noise vs latent".into(),
                expected: format!("{:?}", ex.z_t.z.dim()),
                actual: format!("{:?}", ex.eps.dim()),
            });
        }
        total += ex.eps.len();
    }
    Ok(total)
}

/// Squared error between true and predicted noise, summed over the batch and
/// divided by the total element count.
pub fn training_loss(
    batch: &[TrainingExample],
    predictor: &(dyn NoisePredictor + Sync),
) -> Result<f64, DiffusionError> {
    let total = check_batch(batch)?;
    let sums = batch
        .par_iter()
        .map(|ex| {
            let pred = predictor.predict(&ex.z_t, ex.t, &ex.cond)?;
            Ok(sum_sq(&pred, &ex.eps))
        })
        .collect::<Result<Vec<f64>, DiffusionError>>()?;
    Ok(sums.iter().sum::<f64>() / total as f64)
}

/// Loss and its gradient with respect to every adapter tensor.
///
/// Backbone tensors enter each tape as constants, so they carry no gradient
/// state at all. Per-example tapes run in parallel; their results are reduced
/// in batch order.
pub fn loss_and_gradients(
    backbone: &BackboneWeights,
    adapter: &AdapterWeights,
    batch: &[TrainingExample],
    lambda: f64,
) -> Result<(f64, Gradients), DiffusionError> {
    let total = check_batch(batch)? as f64;
    adapter.validate(backbone.spec())?;
    let per_example = batch
        .par_iter()
        .map(|ex| example_grad(backbone, adapter, ex, lambda, total))
        .collect::<Result<Vec<_>, DiffusionError>>()?;

    let mut loss = 0.0;
    let mut grads = Gradients::default();
    for (l, g) in per_example {
        loss += l;
        for (name, v) in g.by_name {
            match grads.by_name.get_mut(&name) {
                Some(acc) => *acc += &v,
                None => {
                    grads.by_name.insert(name, v);
                }
            }
        }
    }
    // Adapter tensors that never reached the loss still get a zero entry.
    for (name, t) in adapter.to_named() {
        grads
            .by_name
            .entry(name)
            .or_insert_with(|| ndarray::Array2::zeros(t.dim()));
    }
    Ok((loss, grads))
}

fn example_grad(
    backbone: &BackboneWeights,
    adapter: &AdapterWeights,
    ex: &TrainingExample,
    lambda: f64,
    total: f64,
) -> Result<(f64, Gradients), DiffusionError> {
    let mut tape = Tape::new();
    let vars = backbone.to_tape(&mut tape);
    let text = tape.constant(ex.cond.text_embedding.clone());
    let avars = adapter.to_tape(&mut tape, true);
    let face = match &ex.cond.face {
        Some(f) => Some(face_tokens_on_tape(&mut tape, &avars, f, adapter)?),
        None => None,
    };
    let binding = face.map(|face_tokens| AdapterBinding {
        vars: &avars,
        face_tokens,
        lambda,
    });
    let pred = backbone.forward_on_tape(&mut tape, &vars, &ex.z_t, ex.t, text, binding.as_ref());
    let target = tape.constant(tokens_from_latent(&ex.eps));
    let diff = tape.sub(pred, target);
    let sq = tape.sum_squares(diff);
    let loss = tape.scale(sq, 1.0 / total);
    let value = tape.value(loss)[[0, 0]];
    if !value.is_finite() {
        return Err(DiffusionError::NonFinite("training loss".into()));
    }
    let grads = tape.backward(loss);
    if !grads.by_name.values().all(all_finite) {
        return Err(DiffusionError::NonFinite("adapter gradients".into()));
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_adapter, AdapterConfig, FaceTokens};
    use crate::diffusion::{BackboneSpec, FaceCondition};
    use ndarray::Array2;

    struct Echo;
    impl NoisePredictor for Echo {
        fn predict(
            &self,
            z_t: &LatentVideo,
            _: usize,
            _: &ConditionBundle,
        ) -> Result<Array4<f64>, DiffusionError> {
            Ok(z_t.z.clone())
        }
    }

    struct Ones;
    impl NoisePredictor for Ones {
        fn predict(
            &self,
            z_t: &LatentVideo,
            _: usize,
            _: &ConditionBundle,
        ) -> Result<Array4<f64>, DiffusionError> {
            Ok(Array4::ones(z_t.z.dim()))
        }
    }

    fn example(eps: Array4<f64>, z: Array4<f64>) -> TrainingExample {
        TrainingExample {
            z_t: LatentVideo::new(z).unwrap(),
            t: 0,
            eps,
            cond: ConditionBundle::new(Array2::zeros((1, 1)), None),
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let e = Array4::from_shape_fn((1, 2, 2, 2), |(_, a, b, c)| (a + b * c) as f64);
        assert_eq!(training_loss(&[example(e.clone(), e)], &Echo).unwrap(), 0.0);
    }

    #[test]
    fn ones_against_zero_noise_is_one() {
        let z = Array4::zeros((2, 3, 2, 2));
        let batch = [example(z.clone(), z.clone()), example(z.clone(), z)];
        assert_eq!(training_loss(&batch, &Ones).unwrap(), 1.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(training_loss(&[], &Echo).is_err());
    }

    #[test]
    fn tape_loss_matches_plain_prediction() {
        let spec = BackboneSpec::ci();
        let bb = BackboneWeights::new(spec.clone()).unwrap();
        let mut a = init_adapter(&spec, AdapterConfig::for_backbone(&spec), 1, None).unwrap();
        for (_, t) in a.tensors_mut() {
            t.mapv_inplace(|v| v + 0.01);
        }
        let tokens = FaceTokens {
            tokens: Array2::from_elem((4, spec.d_ctx), 0.3),
            provenance: vec![],
        };
        let s = spec.latent_size;
        let ex = TrainingExample {
            z_t: LatentVideo::new(Array4::from_shape_fn((2, 3, s, s), |(a, b, c, d)| {
                ((a + b + c * d) as f64).sin()
            }))
            .unwrap(),
            t: 321,
            eps: Array4::from_shape_fn((2, 3, s, s), |(a, b, c, d)| ((a * b + c + d) as f64).cos()),
            cond: ConditionBundle::new(
                Array2::from_elem((spec.n_text, spec.d_ctx), 0.2),
                Some(FaceCondition::Tokens(tokens)),
            ),
        };
        let (loss, grads) = loss_and_gradients(&bb, &a, std::slice::from_ref(&ex), 1.0).unwrap();
        let plain = training_loss(
            std::slice::from_ref(&ex),
            &crate::diffusion::Denoiser {
                backbone: &bb,
                adapter: Some(&a),
                lambda: 1.0,
            },
        )
        .unwrap();
        assert!((loss - plain).abs() < 1e-12);
        assert_eq!(grads.by_name.len(), a.to_named().len());
        assert!(grads
            .by_name
            .keys()
            .all(|k| !k.contains("temporal") && !k.starts_with("level")));
    }
}
