//! Adapter checkpoints: a named-tensor archive (little-endian `f32`) whose
//! JSON header carries `format_version`, `backbone_spec_hash`, `n_queries`,
//! `d_ctx`, `lambda_default` and `seed`, plus the full adapter config and
//! backbone spec so a checkpoint is self-describing.

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::archive::{read_archive, write_archive, DType};
use crate::diffusion::BackboneSpec;

use super::{AdapterConfig, AdapterError, AdapterWeights};

pub const CHECKPOINT_VERSION: u64 = 1;

pub fn save_adapter(
    weights: &AdapterWeights,
    spec: &BackboneSpec,
    path: &Path,
) -> Result<(), AdapterError> {
    weights.validate(spec)?;
    let mut meta = Map::new();
    meta.insert("format_version".into(), json!(CHECKPOINT_VERSION));
    meta.insert("backbone_spec_hash".into(), json!(spec.hash()));
    meta.insert("n_queries".into(), json!(weights.config.n_queries));
    meta.insert("d_ctx".into(), json!(weights.config.d_ctx));
    meta.insert("lambda_default".into(), json!(weights.lambda_default));
    meta.insert("seed".into(), json!(weights.seed));
    meta.insert(
        "adapter_config".into(),
        serde_json::to_value(&weights.config).expect("config serializes"),
    );
    meta.insert(
        "backbone_spec".into(),
        serde_json::to_value(spec).expect("spec serializes"),
    );
    write_archive(path, meta, &weights.to_named(), DType::F32)?;
    Ok(())
}

struct Parsed {
    weights_meta: Map<String, Value>,
    tensors: crate::tensor::NamedTensors,
    hash: String,
    spec: BackboneSpec,
    config: AdapterConfig,
}

fn parse(path: &Path) -> Result<Parsed, AdapterError> {
    let (meta, tensors) = read_archive(path)?;
    let version = meta
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| AdapterError::Malformed("missing format_version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(AdapterError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hash = meta
        .get("backbone_spec_hash")
        .and_then(Value::as_str)
        .ok_or_else(|| AdapterError::Malformed("missing backbone_spec_hash".into()))?
        .to_string();
    let spec: BackboneSpec = serde_json::from_value(
        meta.get("backbone_spec")
            .cloned()
            .ok_or_else(|| AdapterError::Malformed("missing backbone_spec".into()))?,
    )
    .map_err(|e| AdapterError::Malformed(format!("backbone_spec: {e}")))?;
    let config: AdapterConfig = serde_json::from_value(
        meta.get("adapter_config")
            .cloned()
            .ok_or_else(|| AdapterError::Malformed("missing adapter_config".into()))?,
    )
    .map_err(|e| AdapterError::Malformed(format!("adapter_config: {e}")))?;
    Ok(Parsed {
        weights_meta: meta,
        tensors,
        hash,
        spec,
        config,
    })
}

fn build(p: Parsed, spec: &BackboneSpec) -> Result<AdapterWeights, AdapterError> {
    let lambda = p
        .weights_meta
        .get("lambda_default")
        .and_then(Value::as_f64)
        .ok_or_else(|| AdapterError::Malformed("missing lambda_default".into()))?;
    let seed = p
        .weights_meta
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| AdapterError::Malformed("missing seed".into()))?;
    AdapterWeights::from_named(spec, p.config, p.tensors, lambda, seed)
}

/// Load a checkpoint and require that it was saved against `spec`.
pub fn load_adapter(path: &Path, spec: &BackboneSpec) -> Result<AdapterWeights, AdapterError> {
    let p = parse(path)?;
    let expected = spec.hash();
    if p.hash != expected {
        return Err(AdapterError::HashMismatch {
            found: p.hash,
            expected,
        });
    }
    build(p, spec)
}

/// Load a checkpoint together with the backbone spec embedded in it.
pub fn load_adapter_unchecked(path: &Path) -> Result<(AdapterWeights, BackboneSpec), AdapterError> {
    let p = parse(path)?;
    if p.spec.hash() != p.hash {
        return Err(AdapterError::HashMismatch {
            found: p.spec.hash(),
            expected: p.hash,
        });
    }
    let spec = p.spec.clone();
    Ok((build(p, &spec)?, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::init_adapter;
    use std::fs;

    fn trained_like() -> (AdapterWeights, BackboneSpec) {
        let s = BackboneSpec::ci();
        let mut w = init_adapter(&s, AdapterConfig::for_backbone(&s), 4, None).unwrap();
        for (_, t) in w.tensors_mut() {
            t.mapv_inplace(|x| (x * 1.37 + 0.01) as f32 as f64);
        }
        w.lambda_default = 0.75;
        (w, s)
    }

    #[test]
    fn save_then_load_is_bitwise() {
        let (w, s) = trained_like();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_adapter(&w, &s, &p).unwrap();
        let back = load_adapter(&p, &s).unwrap();
        for ((n1, a), (n2, b)) in w.to_named().iter().zip(back.to_named().iter()) {
            assert_eq!(n1, n2);
            assert!(
                a.iter()
                    .zip(b.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "{n1}"
            );
        }
        assert_eq!(back, w);
        let (again, spec) = load_adapter_unchecked(&p).unwrap();
        assert_eq!(again, w);
        assert_eq!(spec, s);
    }

    #[test]
    fn half_truncated_file_is_a_truncation_error() {
        let (w, s) = trained_like();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_adapter(&w, &s, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_adapter(&p, &s),
            Err(AdapterError::Truncated { .. })
        ));
    }

    #[test]
    fn spec_hash_mismatch_names_both_hashes() {
        let (w, s) = trained_like();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_adapter(&w, &s, &p).unwrap();
        let mut other = s.clone();
        other.weight_seed += 1;
        let err = load_adapter(&p, &other).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains(&s.hash()) && msg.contains(&other.hash()),
            "{msg}"
        );
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let (w, s) = trained_like();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut meta = Map::new();
        meta.insert("format_version".into(), json!(99));
        write_archive(&p, meta, &w.to_named(), DType::F32).unwrap();
        assert!(matches!(
            load_adapter(&p, &s),
            Err(AdapterError::Version { found: 99, .. })
        ));
    }
}
