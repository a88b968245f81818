use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{rng_for, stable_hash64, Stream};

use super::detect::{DiskDetector, FaceDetector};
use super::filter::{filter_multi_face_videos, FilterCandidate, FilterReport};
use super::frames::{clip_and_resize, read_video_dir, write_video_dir, ClipConfig, RawVideo};
use super::manifest::{write_manifest, DatasetRecord};
use super::pool::{collect_face_pool, write_pool, FacePool, PoolConfig};
use super::{io_err, DatasetError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BuildConfig {
    pub clip: ClipConfig,
    pub pool: PoolConfig,
    pub seed: u64,
}

impl BuildConfig {
    pub fn ci() -> Self {
        Self {
            clip: ClipConfig::ci(),
            pool: PoolConfig::ci(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub manifest: PathBuf,
    pub records: usize,
    pub report: FilterReport,
    pub warnings: Vec<String>,
}

fn video_dirs(input: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(input)
        .map_err(io_err(input))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("frame_0000.png").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

enum Processed {
    Ready(Array4<f32>, FacePool),
    Skipped(String, String),
}

fn process(
    dir: &Path,
    cfg: &BuildConfig,
    detector: &dyn FaceDetector,
) -> Result<Processed, DatasetError> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let video = RawVideo::new(id.clone(), read_video_dir(dir)?)?;
    let key = stable_hash64(&id);
    let clip = match clip_and_resize(&video, cfg.clip, &mut rng_for(cfg.seed, Stream::Clip, key)) {
        Ok(c) => c,
        Err(e @ DatasetError::TooShort { .. }) => return Ok(Processed::Skipped(id, e.to_string())),
        Err(e) => return Err(e),
    };
    let pool = collect_face_pool(
        &video,
        detector,
        &mut rng_for(cfg.seed, Stream::Pool, key),
        &cfg.pool,
    )?;
    Ok(Processed::Ready(clip, pool))
}

/// Clip, pool and filter every video directory under `input`, writing clips
/// and pools next to `manifest` and the kept records into it.
pub fn build_dataset(
    input: &Path,
    manifest: &Path,
    cfg: &BuildConfig,
) -> Result<BuildSummary, DatasetError> {
    build_dataset_with(input, manifest, cfg, &DiskDetector::default())
}

pub fn build_dataset_with(
    input: &Path,
    manifest: &Path,
    cfg: &BuildConfig,
    detector: &dyn FaceDetector,
) -> Result<BuildSummary, DatasetError> {
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let dirs = video_dirs(input)?;
    let mut warnings = Vec::new();
    if dirs.is_empty() {
        warnings.push(format!("no video directories found in {}", input.display()));
    }
    let processed = dirs
        .par_iter()
        .map(|d| process(d, cfg, detector))
        .collect::<Result<Vec<_>, _>>()?;

    let mut report = FilterReport::default();
    let mut ready = Vec::new();
    for p in processed {
        match p {
            Processed::Ready(clip, pool) => ready.push((clip, pool)),
            Processed::Skipped(id, why) => {
                log::warn!("skipping {id}: {why}");
                report.skip(&id, why);
            }
        }
    }
    let candidates: Vec<FilterCandidate> = ready.iter().map(|(_, p)| p.into()).collect();
    let (kept, filtered) = filter_multi_face_videos(candidates);
    report.kept += filtered.kept;
    report.dropped += filtered.dropped;
    report.reasons.extend(filtered.reasons);

    let kept: std::collections::HashSet<_> = kept.into_iter().map(|c| c.video_id).collect();
    let records = ready
        .par_iter()
        .filter(|(_, pool)| kept.contains(&pool.video_id))
        .map(|(clip, pool)| {
            let clip_path = format!("clips/{}", pool.video_id);
            let face_pool_path = format!("pools/{}", pool.video_id);
            write_video_dir(&root.join(&clip_path), clip)?;
            write_pool(&root.join(&face_pool_path), pool)?;
            Ok(DatasetRecord {
                video_id: pool.video_id.clone(),
                clip_path,
                unified_caption: String::new(),
                face_pool_path,
                n_pool: pool.len(),
                captions: None,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    write_manifest(&records, manifest)?;
    Ok(BuildSummary {
        manifest: manifest.to_path_buf(),
        records: records.len(),
        report,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{
        generate_synthetic_corpus, read_manifest, validate_record, write_corpus, CorpusSpec,
    };

    #[test]
    fn ten_videos_three_multi_face_keep_seven() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(&CorpusSpec::simple(10, 3), 4).unwrap();
        write_corpus(&corpus, &tmp.path().join("raw")).unwrap();
        let manifest = tmp.path().join("data/manifest.jsonl");
        let summary =
            build_dataset(&tmp.path().join("raw"), &manifest, &BuildConfig::ci()).unwrap();
        assert_eq!((summary.report.kept, summary.report.dropped), (7, 3));
        let recs = read_manifest(&manifest).unwrap();
        assert_eq!(recs.len(), 7);
        let root = manifest.parent().unwrap();
        for r in &recs {
            assert!(validate_record(r, root).is_empty());
            assert!(r.n_pool >= 1 && r.n_pool <= 3);
        }
        let multi: Vec<_> = corpus
            .truth
            .videos
            .iter()
            .filter(|v| v.two_person)
            .map(|v| &v.video_id)
            .collect();
        assert!(recs.iter().all(|r| !multi.contains(&&r.video_id)));
    }

    #[test]
    fn empty_input_gives_empty_manifest_and_warning() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tmp.path().join("manifest.jsonl");
        let summary = build_dataset(tmp.path(), &manifest, &BuildConfig::ci()).unwrap();
        assert_eq!(summary.records, 0);
        assert_eq!(summary.warnings.len(), 1);
        assert!(read_manifest(&manifest).unwrap().is_empty());
    }
}
