use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::adapter::{init_adapter, load_adapter, save_adapter, AdapterWeights};
use crate::diffusion::BackboneWeights;

use super::{
    io_err, load_training_data, make_batch, train_step, AdamState, TrainConfig, TrainError,
    TrainStepRecord,
};

const MAX_NON_FINITE: usize = 10;

#[derive(Debug, Clone, Default)]
pub struct LoopOptions {
    /// Continue from the newest complete checkpoint in the output directory.
    pub resume: bool,
    /// Halt once this many steps are complete, without an unscheduled
    /// checkpoint.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps_completed: usize,
    pub resumed_from: Option<usize>,
    /// Checkpoint holding the weights after the last scheduled save.
    pub last_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub records: Vec<TrainStepRecord>,
    pub non_finite_steps: usize,
    pub skipped_records: Vec<String>,
}

pub fn adapter_checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("adapter_step_{step:06}.idk"))
}

pub fn optimizer_checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("optimizer_step_{step:06}.idk"))
}

/// Newest step with both an adapter and an optimizer checkpoint.
pub fn latest_checkpoint(out_dir: &Path) -> Option<usize> {
    let entries = fs::read_dir(out_dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let step: usize = name
                .strip_prefix("adapter_step_")?
                .strip_suffix(".idk")?
                .parse()
                .ok()?;
            optimizer_checkpoint_path(out_dir, step)
                .exists()
                .then_some(step)
        })
        .max()
}

fn save_checkpoint(
    out_dir: &Path,
    step: usize,
    adapter: &AdapterWeights,
    opt: &AdamState,
    backbone: &BackboneWeights,
) -> Result<PathBuf, TrainError> {
    let path = adapter_checkpoint_path(out_dir, step);
    opt.save(&optimizer_checkpoint_path(out_dir, step), step)?;
    save_adapter(adapter, backbone.spec(), &path)?;
    Ok(path)
}

fn load_checkpoint(
    out_dir: &Path,
    step: usize,
    backbone: &BackboneWeights,
) -> Result<(AdapterWeights, AdamState), TrainError> {
    let adapter = load_adapter(&adapter_checkpoint_path(out_dir, step), backbone.spec())?;
    let (opt, saved) = AdamState::load(&optimizer_checkpoint_path(out_dir, step))?;
    if saved != step || !opt.matches(&adapter) {
        return Err(TrainError::Optimizer(format!(
            "optimizer checkpoint for step {step} does not match the adapter"
        )));
    }
    Ok((adapter, opt))
}

/// Keep metrics lines for steps before `step`; a torn trailing line is dropped.
fn truncate_metrics(path: &Path, step: usize) -> Result<(), TrainError> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if let Ok(rec) = serde_json::from_str::<TrainStepRecord>(&line) {
            if rec.step < step {
                kept.push_str(&line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept).map_err(io_err(path))
}

/// Train an adapter on the dataset behind `manifest`, writing checkpoints and
/// `metrics.jsonl` under `out_dir`.
pub fn train_loop(
    manifest: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &LoopOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    for w in cfg.warnings() {
        log::warn!("{w}");
    }
    let adapter_cfg = cfg.adapter_config();
    let backbone = BackboneWeights::new(cfg.backbone.clone())?;
    let checksum = backbone.checksum();
    let (data, skipped_records) = load_training_data(manifest, &cfg.backbone, &adapter_cfg)?;

    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let cfg_path = out_dir.join("train_config.json");
    fs::write(
        &cfg_path,
        serde_json::to_string_pretty(cfg).expect("config serializes"),
    )
    .map_err(io_err(&cfg_path))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let diag_path = out_dir.join("diagnostics.jsonl");

    let resume_step = if opts.resume {
        latest_checkpoint(out_dir)
    } else {
        None
    };
    let (mut adapter, mut opt, start, mut last_saved) = match resume_step {
        Some(step) => {
            let (a, o) = load_checkpoint(out_dir, step, &backbone)?;
            truncate_metrics(&metrics_path, step)?;
            log::info!("resuming from step {step}");
            (a, o, step, step)
        }
        None => {
            let a = init_adapter(&cfg.backbone, adapter_cfg, cfg.seed, None)?;
            let o = AdamState::new(&a);
            fs::write(&metrics_path, "").map_err(io_err(&metrics_path))?;
            if diag_path.exists() {
                fs::remove_file(&diag_path).map_err(io_err(&diag_path))?;
            }
            save_checkpoint(out_dir, 0, &a, &o, &backbone)?;
            (a, o, 0, 0)
        }
    };

    let mut metrics = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let mut records = Vec::new();
    let (mut consecutive, mut non_finite_steps) = (0, 0);
    let mut done = start;
    for step in start..cfg.steps {
        if opts.stop_after.is_some_and(|s| done >= s) {
            break;
        }
        let batch = make_batch(&data, step, cfg)?;
        match train_step(&backbone, &mut adapter, &mut opt, &batch, cfg, step) {
            Ok(rec) => {
                consecutive = 0;
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(metrics, "{line}").map_err(io_err(&metrics_path))?;
                metrics.flush().map_err(io_err(&metrics_path))?;
                records.push(rec);
            }
            Err(TrainError::NonFinite {
                step,
                what,
                video_ids,
                ref_crop_ids,
                timesteps,
            }) => {
                log::warn!("step {step}: non-finite {what}, skipping batch");
                let diag = json!({
                    "step": step, "what": what, "video_ids": video_ids,
                    "ref_crop_ids": ref_crop_ids, "timesteps": timesteps,
                });
                let mut f = OpenOptions::new()
                    .append(true)
                    .create(true)
                    .open(&diag_path)
                    .map_err(io_err(&diag_path))?;
                writeln!(f, "{diag}").map_err(io_err(&diag_path))?;
                consecutive += 1;
                non_finite_steps += 1;
                if non_finite_steps > MAX_NON_FINITE {
                    return Err(TrainError::TooManyNonFinite(non_finite_steps));
                }
                if consecutive > cfg.nonfinite_patience {
                    log::warn!("reloading checkpoint from step {last_saved}");
                    (adapter, opt) = load_checkpoint(out_dir, last_saved, &backbone)?;
                    consecutive = 0;
                }
            }
            Err(e) => return Err(e),
        }
        done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            save_checkpoint(out_dir, done, &adapter, &opt, &backbone)?;
            last_saved = done;
        }
    }

    let after = backbone.checksum();
    if after != checksum {
        return Err(TrainError::BackboneChanged {
            before: checksum,
            after,
        });
    }
    if done == cfg.steps {
        let final_path = out_dir.join("adapter.idk");
        save_adapter(&adapter, backbone.spec(), &final_path)?;
    }
    Ok(TrainOutcome {
        steps_completed: done,
        resumed_from: resume_step,
        last_checkpoint: adapter_checkpoint_path(out_dir, last_saved),
        metrics_path,
        records,
        non_finite_steps,
        skipped_records,
    })
}
