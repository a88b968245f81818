use std::collections::BTreeMap;

use ndarray::Array2;

use super::{AdapterError, FaceTokens};

/// Convex blend of several identities' face tokens.
///
/// Weights are normalized to sum to one. Zero-weight inputs are skipped
/// entirely, so a one-hot weight vector returns its input unchanged.
pub fn mix_identities(
    tokens_list: &[FaceTokens],
    mix_weights: &[f64],
) -> Result<FaceTokens, AdapterError> {
    let Some(first) = tokens_list.first() else {
        return Err(AdapterError::Argument("no face tokens to mix".into()));
    };
    if tokens_list.len() != mix_weights.len() {
        return Err(AdapterError::Argument(format!(
            "{} face token sets but {} mix weights",
            tokens_list.len(),
            mix_weights.len()
        )));
    }
    if let Some(w) = mix_weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(AdapterError::Argument(format!(
            "mix weights must be finite and non-negative, got {w}"
        )));
    }
    let total: f64 = mix_weights.iter().sum();
    if total == 0.0 {
        return Err(AdapterError::Argument("mix weights are all zero".into()));
    }
    for t in tokens_list {
        if t.tokens.dim() != first.tokens.dim() {
            return Err(AdapterError::Shape {
                context: "identity mixing".into(),
                expected: format!("{:?}", first.tokens.dim()),
                actual: format!("{:?}", t.tokens.dim()),
            });
        }
    }

    let mut out: Option<Array2<f64>> = None;
    let mut provenance: BTreeMap<String, f64> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (t, &w) in tokens_list.iter().zip(mix_weights) {
        if w == 0.0 {
            continue;
        }
        let w = w / total;
        out = Some(match out {
            None => &t.tokens * w,
            Some(mut acc) => {
                acc.scaled_add(w, &t.tokens);
                acc
            }
        });
        for (src, pw) in &t.provenance {
            if !provenance.contains_key(src) {
                order.push(src.clone());
            }
            *provenance.entry(src.clone()).or_default() += w * pw;
        }
    }
    Ok(FaceTokens {
        tokens: out.expect("at least one non-zero weight"),
        provenance: order
            .into_iter()
            .map(|s| {
                let w = provenance[&s];
                (s, w)
            })
            .collect(),
    })
}
