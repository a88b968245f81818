mod inspect;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use idkit_core::adapter::load_adapter_unchecked;
use idkit_core::caption::{
    caption_corpus, CaptionError, CaptionOptions, CaptionServices, EndpointConfig,
};
use idkit_core::dataset::{
    build_dataset, generate_synthetic_corpus, write_corpus, write_video_dir, BuildConfig,
    ClipConfig, CorpusSpec, DatasetError, PoolConfig, DATA_ROOT_ENV,
};
use idkit_core::diffusion::{
    generate_video, BackboneWeights, DiffusionError, GenerationConfig, UncondMode,
};
use idkit_core::imageio::{read_png, write_gif};
use idkit_core::train::{train_loop, LoopOptions, TrainConfig, TrainError};

/// Face-adapter toolkit for a toy text-to-video diffusion model.
#[derive(Debug, Parser)]
#[command(name = "idkit", version)]
struct Cli {
    /// Directory that relative paths are resolved against (created if missing).
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Print machine-readable JSON summaries.
    #[arg(long, global = true)]
    json: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// 8 frames at 64x64, pools of 3 crops at 32x32.
    Ci,
    /// 16 frames at 512x512, pools of 5 crops at 224x224.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Uncond {
    NullTextZeroFace,
    NullTextOnly,
}

impl From<Uncond> for UncondMode {
    fn from(u: Uncond) -> Self {
        match u {
            Uncond::NullTextZeroFace => UncondMode::NullTextZeroFace,
            Uncond::NullTextOnly => UncondMode::NullTextOnly,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic face-video corpus with ground truth.
    SynthCorpus {
        /// JSON corpus spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Clip, resize and build face pools; drop multi-face videos.
    BuildDataset {
        /// Directory of video directories (numbered PNG frames).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        #[arg(long)]
        clip_length: Option<usize>,
        /// Side of the square output frames.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        pool_target: Option<usize>,
        /// Side of the square face crops.
        #[arg(long)]
        ref_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attach attribute, action and unified captions to every record.
    Caption {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON endpoint config for the attribute, action and unifier roles.
        #[arg(long)]
        endpoints: PathBuf,
        /// Records captioned in parallel.
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        /// Defaults to `<manifest>.quarantine.jsonl`.
        #[arg(long)]
        quarantine: Option<PathBuf>,
    },
    /// Train a face adapter against the frozen toy backbone.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON training config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the newest checkpoint in --out.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        null_text_prob: Option<f64>,
        #[arg(long)]
        face_drop_prob: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample a video conditioned on a prompt and reference face(s).
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Reference face image (PNG); repeat for identity mixing.
        #[arg(long = "ref")]
        refs: Vec<PathBuf>,
        /// One mixing weight per reference.
        #[arg(long, num_args = 1..)]
        mix: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 7.5)]
        scale: f64,
        /// Defaults to 16, or 8 under --preset ci.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Uncond::NullTextZeroFace)]
        uncond: Uncond,
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize and validate a manifest, pool directory or checkpoint.
    Inspect { path: PathBuf },
}

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Invariant violations found by a check; exits with status 1.
#[derive(Debug)]
struct Invalid(Vec<String>);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violation(s):", self.0.len())?;
        for v in &self.0 {
            write!(f, "\n  {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Invalid {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Usage>()
            || matches!(
                e.downcast_ref(),
                Some(DatasetError::Spec { .. } | DatasetError::Argument(_))
            )
            || matches!(
                e.downcast_ref(),
                Some(CaptionError::Config(_) | CaptionError::Argument(_))
            )
            || matches!(e.downcast_ref(), Some(TrainError::Config(_)))
            || matches!(e.downcast_ref(), Some(DiffusionError::Config(_)))
    })
}

struct Ctx {
    root: Option<PathBuf>,
    json: bool,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn existing(&self, p: &Path, what: &str) -> Result<PathBuf> {
        let p = self.path(p);
        if !p.exists() {
            return Err(usage(format!("{what} {} does not exist", p.display())));
        }
        Ok(p)
    }

    fn report<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        if self.json {
            println!(
                "{}",
                serde_json::to_string_pretty(value).expect("summary serializes")
            );
        } else {
            println!("{}", text());
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{what} {}: {e}", path.display())))
}

fn synth_corpus(ctx: &Ctx, spec: &Path, out: &Path, seed: u64) -> Result<()> {
    let spec_path = ctx.existing(spec, "corpus spec")?;
    let spec: CorpusSpec = read_json(&spec_path, "corpus spec")?;
    let corpus = generate_synthetic_corpus(&spec, seed)?;
    let out = ctx.path(out);
    write_corpus(&corpus, &out)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        out: &'a Path,
        videos: usize,
        multi_face: usize,
    }
    let multi = corpus.truth.videos.iter().filter(|v| v.two_person).count();
    ctx.report(
        &Summary {
            out: &out,
            videos: corpus.videos.len(),
            multi_face: multi,
        },
        || {
            format!(
                "wrote {} videos ({multi} multi-face) to {}",
                corpus.videos.len(),
                out.display()
            )
        },
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build(
    ctx: &Ctx,
    input: &Path,
    manifest: &Path,
    preset: Preset,
    clip_length: Option<usize>,
    size: Option<usize>,
    pool_target: Option<usize>,
    ref_size: Option<usize>,
    seed: u64,
) -> Result<()> {
    let input = ctx.existing(input, "input directory")?;
    let (clip, pool) = match preset {
        Preset::Ci => (ClipConfig::ci(), PoolConfig::ci()),
        Preset::Full => (ClipConfig::default(), PoolConfig::default()),
    };
    let cfg = BuildConfig {
        clip: ClipConfig {
            clip_length: clip_length.unwrap_or(clip.clip_length),
            size: size.unwrap_or(clip.size),
        },
        pool: PoolConfig {
            pool_target: pool_target.unwrap_or(pool.pool_target),
            ref_size: ref_size.unwrap_or(pool.ref_size),
            ..pool
        },
        seed,
    };
    let summary = build_dataset(&input, &ctx.path(manifest), &cfg)?;
    for w in &summary.warnings {
        log::warn!("{w}");
        eprintln!("warning: {w}");
    }
    ctx.report(&summary, || {
        let mut s = format!(
            "manifest {}: kept {}, dropped {}",
            summary.manifest.display(),
            summary.report.kept,
            summary.report.dropped
        );
        for (id, reason) in &summary.report.reasons {
            s.push_str(&format!(
                "\n  dropped {id}: {}",
                serde_json::to_string(reason).expect("reason serializes")
            ));
        }
        s
    });
    Ok(())
}

fn caption(
    ctx: &Ctx,
    manifest: &Path,
    endpoints: &Path,
    concurrency: usize,
    quarantine: Option<&Path>,
) -> Result<()> {
    let endpoints = ctx.existing(endpoints, "endpoints file")?;
    let manifest = ctx.existing(manifest, "manifest")?;
    let services = CaptionServices::from_config(&EndpointConfig::load(&endpoints)?)?;
    let opts = CaptionOptions {
        concurrency,
        quarantine: quarantine.map(|q| ctx.path(q)),
    };
    let summary = caption_corpus(&manifest, &services, &opts)?;
    ctx.report(&summary, || {
        format!(
            "{} records: {} captioned, {} already captioned, {} quarantined, {} new calls",
            summary.records,
            summary.captioned,
            summary.already_captioned,
            summary.quarantined,
            summary.new_calls
        )
    });
    Ok(())
}

struct TrainOverrides {
    steps: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    null_text_prob: Option<f64>,
    face_drop_prob: Option<f64>,
    checkpoint_every: Option<usize>,
    seed: Option<u64>,
}

fn train(
    ctx: &Ctx,
    manifest: &Path,
    config: Option<&Path>,
    out: &Path,
    resume: bool,
    o: TrainOverrides,
) -> Result<()> {
    let manifest = ctx.existing(manifest, "manifest")?;
    let mut cfg: TrainConfig = match config {
        Some(c) => read_json(&ctx.existing(c, "train config")?, "train config")?,
        None => TrainConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $(if let Some(v) = o.$f { cfg.$f = v; })* };
    }
    over!(
        steps,
        lr,
        batch_size,
        null_text_prob,
        face_drop_prob,
        checkpoint_every,
        seed
    );
    cfg.validate()?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let out = ctx.path(out);
    let outcome = train_loop(
        &manifest,
        &cfg,
        &out,
        &LoopOptions {
            resume,
            stop_after: None,
        },
    )?;
    #[derive(Serialize)]
    struct Summary<'a> {
        steps_completed: usize,
        resumed_from: Option<usize>,
        last_checkpoint: &'a Path,
        metrics: &'a Path,
        final_loss: Option<f64>,
        non_finite_steps: usize,
        skipped_records: &'a [String],
    }
    let final_loss = outcome.records.last().map(|r| r.loss);
    ctx.report(
        &Summary {
            steps_completed: outcome.steps_completed,
            resumed_from: outcome.resumed_from,
            last_checkpoint: &outcome.last_checkpoint,
            metrics: &outcome.metrics_path,
            final_loss,
            non_finite_steps: outcome.non_finite_steps,
            skipped_records: &outcome.skipped_records,
        },
        || {
            format!(
                "trained to step {}; checkpoint {}; metrics {}{}",
                outcome.steps_completed,
                outcome.last_checkpoint.display(),
                outcome.metrics_path.display(),
                final_loss
                    .map(|l| format!("; last loss {l:.5}"))
                    .unwrap_or_default()
            )
        },
    );
    Ok(())
}

fn generate(ctx: &Ctx, checkpoint: &Path, cfg: GenerationConfig, out: &Path) -> Result<()> {
    if !cfg.mix_weights.is_empty() && cfg.mix_weights.len() != cfg.reference_images.len() {
        return Err(usage(format!(
            "{} --mix weights given for {} --ref images",
            cfg.mix_weights.len(),
            cfg.reference_images.len()
        )));
    }
    cfg.validate()?;
    let checkpoint = ctx.existing(checkpoint, "checkpoint")?;
    let (adapter, spec) = load_adapter_unchecked(&checkpoint)?;
    let backbone = BackboneWeights::new(spec)?;
    let refs = cfg
        .reference_images
        .iter()
        .map(|r| {
            let p = ctx.existing(Path::new(r), "reference image")?;
            read_png(&p).with_context(|| format!("reading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let video = generate_video(&backbone, Some(&adapter), &cfg, &refs)?;
    let out = ctx.path(out);
    write_video_dir(&out, &video.frames)?;
    let frames: Vec<_> = video.frames.outer_iter().map(|f| f.to_owned()).collect();
    let gif = out.join("preview.gif");
    write_gif(&gif, &frames, 125).with_context(|| format!("writing {}", gif.display()))?;
    let resolved = serde_json::to_string_pretty(&cfg)?;
    fs::write(out.join("generation.json"), &resolved)?;
    println!("{resolved}");
    if !ctx.json {
        eprintln!(
            "wrote {} frames and preview.gif to {}",
            frames.len(),
            out.display()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(root) = &cli.data_root {
        fs::create_dir_all(root)
            .with_context(|| format!("creating data root {}", root.display()))?;
    }
    let ctx = Ctx {
        root: cli.data_root.clone(),
        json: cli.json,
    };
    match cli.command {
        Command::SynthCorpus { spec, out, seed } => synth_corpus(&ctx, &spec, &out, seed),
        Command::BuildDataset {
            input,
            manifest,
            preset,
            clip_length,
            size,
            pool_target,
            ref_size,
            seed,
        } => build(
            &ctx,
            &input,
            &manifest,
            preset,
            clip_length,
            size,
            pool_target,
            ref_size,
            seed,
        ),
        Command::Caption {
            manifest,
            endpoints,
            concurrency,
            quarantine,
        } => caption(
            &ctx,
            &manifest,
            &endpoints,
            concurrency,
            quarantine.as_deref(),
        ),
        Command::Train {
            manifest,
            config,
            out,
            resume,
            steps,
            lr,
            batch_size,
            null_text_prob,
            face_drop_prob,
            checkpoint_every,
            seed,
        } => train(
            &ctx,
            &manifest,
            config.as_deref(),
            &out,
            resume,
            TrainOverrides {
                steps,
                lr,
                batch_size,
                null_text_prob,
                face_drop_prob,
                checkpoint_every,
                seed,
            },
        ),
        Command::Generate {
            checkpoint,
            prompt,
            refs,
            mix,
            lambda,
            scale,
            frames,
            steps,
            seed,
            uncond,
            preset,
            out,
        } => {
            let cfg = GenerationConfig {
                prompt,
                reference_images: refs.iter().map(|r| r.display().to_string()).collect(),
                mix_weights: mix,
                lambda,
                guidance_scale: scale,
                frames: frames.unwrap_or(match preset {
                    Preset::Ci => 8,
                    Preset::Full => 16,
                }),
                steps,
                seed,
                uncond_mode: uncond.into(),
            };
            generate(&ctx, &checkpoint, cfg, &out)
        }
        Command::Inspect { path } => inspect::inspect(&ctx.existing(&path, "path")?, ctx.json),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
