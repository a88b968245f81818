use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::BackboneSpec;
use crate::graph::{Tape, Var};
use crate::tensor::{all_finite, normal_matrix, rng_for, round_to_f32, NamedTensors, Stream};

use super::{AdapterError, PatchPoolExtractor};

/// Shape and construction parameters of the face adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub n_queries: usize,
    pub d_query: usize,
    /// Width of the extractor's feature tokens.
    pub d_feature: usize,
    pub d_encoder: usize,
    /// Must equal the backbone's text-context width.
    pub d_ctx: usize,
    /// Layer-normalize encoder output before the output projection.
    pub normalize_tokens: bool,
    /// Side of the patch grid used by the stub extractor.
    pub feature_grid: usize,
    pub feature_seed: u64,
}

impl AdapterConfig {
    pub fn for_backbone(spec: &BackboneSpec) -> Self {
        Self {
            n_queries: 16,
            d_query: 16,
            d_feature: 16,
            d_encoder: 16,
            d_ctx: spec.d_ctx,
            normalize_tokens: true,
            feature_grid: 4,
            feature_seed: 0xfea7,
        }
    }

    /// The stub extractor this adapter was built against.
    pub fn extractor(&self) -> PatchPoolExtractor {
        PatchPoolExtractor::new(
            self.feature_grid,
            self.feature_grid,
            self.d_feature,
            self.feature_seed,
        )
    }
}

/// Image-branch key/value projections for one cross-attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageKv {
    /// `[d_ctx × d_attn]`
    pub to_k_img: Array2<f64>,
    /// `[d_ctx × d_attn]`
    pub to_v_img: Array2<f64>,
}

/// Every trainable tensor of the adapter. The backbone is not in here.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub config: AdapterConfig,
    /// `[n_queries × d_query]`
    pub latent_queries: Array2<f64>,
    /// Query-encoder tensors keyed `to_q`, `to_k`, `to_v`, `proj_out`.
    pub encoder: NamedTensors,
    /// Keyed by backbone cross-attention layer id.
    pub layers: BTreeMap<String, ImageKv>,
    pub lambda_default: f64,
    pub seed: u64,
    pub backbone_hash: String,
}

/// Adapter tensors placed on a [`Tape`].
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub latent_queries: Var,
    pub to_q: Var,
    pub to_k: Var,
    pub to_v: Var,
    pub proj_out: Var,
    pub normalize: bool,
    pub layers: BTreeMap<String, (Var, Var)>,
}

const ENCODER_KEYS: [&str; 4] = ["to_q", "to_k", "to_v", "proj_out"];

fn expected_shapes(spec: &BackboneSpec, cfg: &AdapterConfig) -> BTreeMap<String, (usize, usize)> {
    let mut m = BTreeMap::new();
    m.insert("latent_queries".into(), (cfg.n_queries, cfg.d_query));
    m.insert("encoder.to_q".into(), (cfg.d_query, cfg.d_encoder));
    m.insert("encoder.to_k".into(), (cfg.d_feature, cfg.d_encoder));
    m.insert("encoder.to_v".into(), (cfg.d_feature, cfg.d_encoder));
    m.insert("encoder.proj_out".into(), (cfg.d_encoder, cfg.d_ctx));
    for (i, level) in spec.levels.iter().enumerate() {
        let id = BackboneSpec::cross_attention_id(i);
        m.insert(format!("layers.{id}.to_k_img"), (cfg.d_ctx, level.width));
        m.insert(format!("layers.{id}.to_v_img"), (cfg.d_ctx, level.width));
    }
    m
}

impl AdapterWeights {
    /// Flatten to canonical names (`latent_queries`, `encoder.*`,
    /// `layers.<id>.to_{k,v}_img`).
    pub fn to_named(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        out.insert("latent_queries".into(), self.latent_queries.clone());
        for (k, v) in &self.encoder {
            out.insert(format!("encoder.{k}"), v.clone());
        }
        for (id, kv) in &self.layers {
            out.insert(format!("layers.{id}.to_k_img"), kv.to_k_img.clone());
            out.insert(format!("layers.{id}.to_v_img"), kv.to_v_img.clone());
        }
        out
    }

    /// Rebuild from canonical names, validating shapes against `spec`.
    pub fn from_named(
        spec: &BackboneSpec,
        config: AdapterConfig,
        mut tensors: NamedTensors,
        lambda_default: f64,
        seed: u64,
    ) -> Result<Self, AdapterError> {
        let shapes = expected_shapes(spec, &config);
        let missing: Vec<String> = shapes
            .keys()
            .filter(|k| !tensors.contains_key(*k))
            .cloned()
            .collect();
        let unknown: Vec<String> = tensors
            .keys()
            .filter(|k| !shapes.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() || !unknown.is_empty() {
            return Err(AdapterError::Malformed(format!(
                "missing tensors {missing:?}, unexpected tensors {unknown:?}"
            )));
        }
        let mut encoder = NamedTensors::new();
        for k in ENCODER_KEYS {
            encoder.insert(k.into(), tensors.remove(&format!("encoder.{k}")).unwrap());
        }
        let mut layers = BTreeMap::new();
        for id in spec.cross_attention_layer_ids() {
            layers.insert(
                id.clone(),
                ImageKv {
                    to_k_img: tensors.remove(&format!("layers.{id}.to_k_img")).unwrap(),
                    to_v_img: tensors.remove(&format!("layers.{id}.to_v_img")).unwrap(),
                },
            );
        }
        let w = Self {
            config,
            latent_queries: tensors.remove("latent_queries").unwrap(),
            encoder,
            layers,
            lambda_default,
            seed,
            backbone_hash: spec.hash(),
        };
        w.validate(spec)?;
        Ok(w)
    }

    /// Check layer keys, shapes and finiteness against a backbone.
    pub fn validate(&self, spec: &BackboneSpec) -> Result<(), AdapterError> {
        let backbone_ids = spec.cross_attention_layer_ids();
        let adapter_ids: Vec<String> = self.layers.keys().cloned().collect();
        let mut sorted_backbone = backbone_ids.clone();
        sorted_backbone.sort();
        if adapter_ids != sorted_backbone {
            return Err(AdapterError::LayerMismatch {
                adapter: adapter_ids,
                backbone: backbone_ids,
            });
        }
        if self.config.d_ctx != spec.d_ctx {
            return Err(AdapterError::Shape {
                context: "adapter d_ctx".into(),
                expected: spec.d_ctx.to_string(),
                actual: self.config.d_ctx.to_string(),
            });
        }
        let shapes = expected_shapes(spec, &self.config);
        for (name, t) in self.to_named() {
            let want = shapes[&name];
            if t.dim() != want {
                return Err(AdapterError::Shape {
                    context: name,
                    expected: format!("{want:?}"),
                    actual: format!("{:?}", t.dim()),
                });
            }
            if !all_finite(&t) {
                return Err(AdapterError::NonFinite(name));
            }
        }
        if !self.lambda_default.is_finite() {
            return Err(AdapterError::NonFinite("lambda_default".into()));
        }
        Ok(())
    }

    /// Mutable access to every tensor under its canonical name.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> =
            vec![("latent_queries".into(), &mut self.latent_queries)];
        for (k, v) in self.encoder.iter_mut() {
            out.push((format!("encoder.{k}"), v));
        }
        for (id, kv) in self.layers.iter_mut() {
            out.push((format!("layers.{id}.to_k_img"), &mut kv.to_k_img));
            out.push((format!("layers.{id}.to_v_img"), &mut kv.to_v_img));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.to_named().values().map(|t| t.len()).sum()
    }

    /// Place the adapter on a tape, as trainable leaves or as constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        let mut leaf = |name: String, t: &Array2<f64>| {
            if trainable {
                tape.param(name, t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let latent_queries = leaf("latent_queries".into(), &self.latent_queries);
        let to_q = leaf("encoder.to_q".into(), &self.encoder["to_q"]);
        let to_k = leaf("encoder.to_k".into(), &self.encoder["to_k"]);
        let to_v = leaf("encoder.to_v".into(), &self.encoder["to_v"]);
        let proj_out = leaf("encoder.proj_out".into(), &self.encoder["proj_out"]);
        let mut layers = BTreeMap::new();
        for (id, kv) in &self.layers {
            let k = leaf(format!("layers.{id}.to_k_img"), &kv.to_k_img);
            let v = leaf(format!("layers.{id}.to_v_img"), &kv.to_v_img);
            layers.insert(id.clone(), (k, v));
        }
        AdapterVars {
            latent_queries,
            to_q,
            to_k,
            to_v,
            proj_out,
            normalize: self.config.normalize_tokens,
            layers,
        }
    }
}

/// Build adapter weights for `spec`.
///
/// Donor tensors (canonical names) are copied at `f32` precision. Everything
/// else is drawn from the seeded init: image values `W_v` start at zero so
/// the adapter is an exact no-op before training, image keys `W_k` are
/// `N(0, 0.02²)`, encoder tensors are `N(0, 1/fan_in)`.
pub fn init_adapter(
    spec: &BackboneSpec,
    config: AdapterConfig,
    seed: u64,
    donor: Option<&NamedTensors>,
) -> Result<AdapterWeights, AdapterError> {
    spec.validate()
        .map_err(|e| AdapterError::Argument(e.to_string()))?;
    if config.d_ctx != spec.d_ctx {
        return Err(AdapterError::Shape {
            context: "adapter d_ctx".into(),
            expected: spec.d_ctx.to_string(),
            actual: config.d_ctx.to_string(),
        });
    }
    let shapes = expected_shapes(spec, &config);

    if let Some(donor) = donor {
        let offending: Vec<String> = donor
            .iter()
            .filter_map(|(name, t)| match shapes.get(name) {
                None => Some(format!("{name} (unknown tensor)")),
                Some(&want) if want != t.dim() => {
                    Some(format!("{name} (expected {want:?}, got {:?})", t.dim()))
                }
                Some(_) if !all_finite(t) => Some(format!("{name} (non-finite)")),
                Some(_) => None,
            })
            .collect();
        if !offending.is_empty() {
            return Err(AdapterError::Donor { offending });
        }
    }

    let mut rng = rng_for(seed, Stream::AdapterInit, 0);
    let mut tensors = NamedTensors::new();
    // Draw in canonical order regardless of donor coverage so that uncovered
    // tensors do not depend on which others the donor supplied.
    for (name, &(rows, cols)) in &shapes {
        let drawn = if name.ends_with(".to_v_img") {
            Array2::zeros((rows, cols))
        } else if name.ends_with(".to_k_img") {
            normal_matrix(&mut rng, rows, cols, 0.02)
        } else {
            normal_matrix(&mut rng, rows, cols, 1.0 / (rows as f64).sqrt())
        };
        let t = match donor.and_then(|d| d.get(name)) {
            Some(d) => {
                let mut d = d.clone();
                round_to_f32(&mut d);
                d
            }
            None => drawn,
        };
        tensors.insert(name.clone(), t);
    }
    AdapterWeights::from_named(spec, config, tensors, 1.0, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BackboneSpec {
        BackboneSpec::ci()
    }

    #[test]
    fn fresh_init_is_reproducible_and_valid() {
        let s = spec();
        let a = init_adapter(&s, AdapterConfig::for_backbone(&s), 11, None).unwrap();
        let b = init_adapter(&s, AdapterConfig::for_backbone(&s), 11, None).unwrap();
        assert_eq!(a, b);
        a.validate(&s).unwrap();
        for kv in a.layers.values() {
            assert!(kv.to_v_img.iter().all(|&x| x == 0.0));
        }
        let c = init_adapter(&s, AdapterConfig::for_backbone(&s), 12, None).unwrap();
        assert_ne!(a.latent_queries, c.latent_queries);
    }

    #[test]
    fn full_donor_is_copied_bitwise() {
        let s = spec();
        let cfg = AdapterConfig::for_backbone(&s);
        let src = init_adapter(&s, cfg.clone(), 99, None).unwrap();
        let mut donor = NamedTensors::new();
        for (name, mut t) in src.to_named() {
            if name.starts_with("layers.") {
                t.mapv_inplace(|x| x + 0.5);
                round_to_f32(&mut t);
                donor.insert(name, t);
            }
        }
        let w = init_adapter(&s, cfg, 1, Some(&donor)).unwrap();
        let named = w.to_named();
        for (name, t) in &donor {
            assert_eq!(&named[name], t, "{name}");
        }
    }

    #[test]
    fn half_donor_leaves_rest_on_the_init_distribution() {
        let s = spec();
        let cfg = AdapterConfig::for_backbone(&s);
        let id0 = BackboneSpec::cross_attention_id(0);
        let id1 = BackboneSpec::cross_attention_id(1);
        let mut donor = NamedTensors::new();
        let shape = (cfg.d_ctx, s.levels[0].width);
        donor.insert(
            format!("layers.{id0}.to_k_img"),
            Array2::from_elem(shape, 0.25),
        );
        donor.insert(
            format!("layers.{id0}.to_v_img"),
            Array2::from_elem(shape, -0.5),
        );
        let w = init_adapter(&s, cfg, 5, Some(&donor)).unwrap();
        assert!(w.layers[&id0].to_k_img.iter().all(|&x| x == 0.25));
        assert!(w.layers[&id0].to_v_img.iter().all(|&x| x == -0.5));

        let k = &w.layers[&id1].to_k_img;
        let n = k.len() as f64;
        let mean = k.sum() / n;
        let sampling_sd = 0.02 / n.sqrt();
        assert!(
            mean.abs() < 3.0 * sampling_sd,
            "mean {mean} vs 3σ {}",
            3.0 * sampling_sd
        );
        let sd = (k.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.02).abs() < 0.005, "sd {sd}");
        assert!(w.layers[&id1].to_v_img.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn donor_shape_mismatch_names_offenders() {
        let s = spec();
        let mut donor = NamedTensors::new();
        donor.insert(
            "layers.level1.cross_attn.to_k_img".into(),
            Array2::zeros((3, 3)),
        );
        donor.insert("bogus".into(), Array2::zeros((1, 1)));
        match init_adapter(&s, AdapterConfig::for_backbone(&s), 0, Some(&donor)) {
            Err(AdapterError::Donor { offending }) => {
                assert_eq!(offending.len(), 2);
                assert!(offending.iter().any(|o| o.starts_with("bogus")));
                assert!(offending.iter().any(|o| o.contains("level1")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layer_keys_must_match_backbone() {
        let s = spec();
        let mut w = init_adapter(&s, AdapterConfig::for_backbone(&s), 0, None).unwrap();
        let kv = w.layers.remove("level1.cross_attn").unwrap();
        w.layers.insert("level0.temporal".into(), kv);
        assert!(matches!(
            w.validate(&s),
            Err(AdapterError::LayerMismatch { .. })
        ));
    }
}
