use ndarray::Array2;

use crate::graph::{Tape, Var};

use super::{attention_on_tape, AdapterError, AdapterVars, AdapterWeights, ImageFeatures};

/// Identity tokens fed to the image branch of every cross-attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTokens {
    /// `[n_queries × d_ctx]`
    pub tokens: Array2<f64>,
    /// `(source_id, weight)` pairs describing where the tokens came from.
    pub provenance: Vec<(String, f64)>,
}

impl FaceTokens {
    pub fn zeros_like(&self) -> Self {
        Self {
            tokens: Array2::zeros(self.tokens.dim()),
            provenance: Vec::new(),
        }
    }
}

pub(crate) const TOKEN_NORM_EPS: f64 = 1e-5;

/// Latent queries attend over image features; the result is optionally
/// layer-normalized and projected to the context width.
pub(crate) fn encode_on_tape(tape: &mut Tape, vars: &AdapterVars, features: Var) -> Var {
    let q = tape.matmul(vars.latent_queries, vars.to_q);
    let k = tape.matmul(features, vars.to_k);
    let v = tape.matmul(features, vars.to_v);
    let mut h = attention_on_tape(tape, q, k, v);
    if vars.normalize {
        h = tape.layer_norm_rows(h, TOKEN_NORM_EPS);
    }
    tape.matmul(h, vars.proj_out)
}

pub fn encode_face(
    features: &ImageFeatures,
    weights: &AdapterWeights,
) -> Result<FaceTokens, AdapterError> {
    let expected = weights.config.d_feature;
    let actual = features.tokens.ncols();
    if actual != expected {
        return Err(AdapterError::Shape {
            context: format!("feature width of {}", features.source_id),
            expected: expected.to_string(),
            actual: actual.to_string(),
        });
    }
    super::ensure_finite("image features", &features.tokens)?;
    let mut tape = Tape::new();
    let vars = weights.to_tape(&mut tape, false);
    let f = tape.constant(features.tokens.clone());
    let out = encode_on_tape(&mut tape, &vars, f);
    Ok(FaceTokens {
        tokens: tape.value(out).clone(),
        provenance: vec![(features.source_id.clone(), 1.0)],
    })
}
