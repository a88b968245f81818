use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use serde_json::Value;

use idkit_core::adapter::load_adapter_unchecked;
use idkit_core::archive::read_archive;
use idkit_core::dataset::{read_manifest, read_pool, validate_pool, validate_record};
use idkit_core::train::{adapter_checkpoint_path, latest_checkpoint, AdamState};

use crate::{usage, Invalid};

#[derive(Debug, Serialize)]
struct Report {
    kind: &'static str,
    path: String,
    details: Value,
    violations: Vec<String>,
}

fn manifest(path: &Path) -> Report {
    let root = path.parent().unwrap_or(Path::new("."));
    let (details, violations) = match read_manifest(path) {
        Err(e) => (Value::Null, vec![e.to_string()]),
        Ok(records) => {
            let violations = records
                .iter()
                .flat_map(|r| validate_record(r, root))
                .collect();
            let captioned = records.iter().filter(|r| r.captions.is_some()).count();
            let crops: usize = records.iter().map(|r| r.n_pool).sum();
            (
                serde_json::json!({"records": records.len(), "captioned": captioned, "pool_crops": crops}),
                violations,
            )
        }
    };
    Report {
        kind: "manifest",
        path: path.display().to_string(),
        details,
        violations,
    }
}

fn pool(dir: &Path) -> Report {
    let (details, violations) = match read_pool(dir) {
        Err(e) => (Value::Null, vec![e.to_string()]),
        Ok(p) => (
            serde_json::json!({
                "video_id": p.video_id,
                "crops": p.len(),
                "source_frames": p.source_frames,
                "frames_examined": p.detections.len(),
            }),
            validate_pool(&p),
        ),
    };
    Report {
        kind: "pool",
        path: dir.display().to_string(),
        details,
        violations,
    }
}

fn checkpoint(path: &Path) -> Report {
    let is_adam = read_archive(path)
        .ok()
        .is_some_and(|(meta, _)| meta.get("kind").and_then(Value::as_str) == Some("adam"));
    let (kind, result) = if is_adam {
        (
            "optimizer",
            AdamState::load(path)
                .map(|(s, step)| serde_json::json!({"step": step, "updates": s.t, "tensors": s.m.len()}))
                .map_err(|e| e.to_string()),
        )
    } else {
        (
            "adapter",
            load_adapter_unchecked(path)
                .map(|(w, spec)| {
                    serde_json::json!({
                        "backbone_spec_hash": spec.hash(),
                        "n_queries": w.config.n_queries,
                        "d_ctx": w.config.d_ctx,
                        "layers": w.layers.keys().collect::<Vec<_>>(),
                        "parameters": w.parameter_count(),
                        "lambda_default": w.lambda_default,
                        "seed": w.seed,
                    })
                })
                .map_err(|e| e.to_string()),
        )
    };
    let (details, violations) = match result {
        Ok(d) => (d, vec![]),
        Err(e) => (Value::Null, vec![e]),
    };
    Report {
        kind,
        path: path.display().to_string(),
        details,
        violations,
    }
}

fn run_dir(dir: &Path) -> Report {
    let metrics = std::fs::read_to_string(dir.join("metrics.jsonl"))
        .map(|s| s.lines().count())
        .unwrap_or(0);
    match latest_checkpoint(dir) {
        None => Report {
            kind: "training_run",
            path: dir.display().to_string(),
            details: serde_json::json!({"metrics_lines": metrics}),
            violations: vec!["no complete checkpoint".into()],
        },
        Some(step) => {
            let ckpt = checkpoint(&adapter_checkpoint_path(dir, step));
            Report {
                kind: "training_run",
                path: dir.display().to_string(),
                details: serde_json::json!({"latest_step": step, "metrics_lines": metrics, "checkpoint": ckpt.details}),
                violations: ckpt.violations,
            }
        }
    }
}

pub fn inspect(path: &Path, json: bool) -> Result<()> {
    let report = if path.is_dir() && path.join("pool.json").is_file() {
        pool(path)
    } else if path.is_dir() && path.join("checkpoints").is_dir() {
        run_dir(path)
    } else if path.extension().is_some_and(|e| e == "jsonl") {
        manifest(path)
    } else if path.extension().is_some_and(|e| e == "idk") {
        checkpoint(path)
    } else {
        return Err(usage(format!(
            "{}: expected a manifest (.jsonl), a pool directory, a training run or a checkpoint (.idk)",
            path.display()
        )));
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{} {}", report.kind, report.path);
        if let Value::Object(map) = &report.details {
            for (k, v) in map {
                println!("  {k}: {v}");
            }
        }
        if report.violations.is_empty() {
            println!("  ok");
        }
    }
    if report.violations.is_empty() {
        Ok(())
    } else {
        Err(Invalid(report.violations).into())
    }
}
