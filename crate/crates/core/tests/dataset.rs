use std::collections::BTreeSet;

use idkit_core::dataset::{
    build_dataset, build_face_pool, clip_and_resize, generate_synthetic_corpus, read_manifest,
    read_pool, sample_random_reference, write_corpus, write_manifest, BuildConfig, ClipConfig,
    CorpusSpec, DatasetRecord, DiskDetector, PartialMultiFace, PoolConfig, RawVideo,
};
use idkit_core::tensor::{rng_for, Stream};
use ndarray::Array4;
use proptest::prelude::*;

#[test]
fn wide_32_frame_video_keeps_the_center_512_columns() {
    let (t, h, w) = (32, 512, 1024);
    let frames = Array4::from_shape_fn((t, h, w, 3), |(f, y, x, c)| match c {
        0 => x as f32 / (w - 1) as f32,
        1 => y as f32 / (h - 1) as f32,
        _ => f as f32 / (t - 1) as f32,
    });
    let video = RawVideo::new("wide", frames).unwrap();
    let clip = clip_and_resize(
        &video,
        ClipConfig::default(),
        &mut rng_for(0, Stream::Clip, 0),
    )
    .unwrap();
    assert_eq!(clip.dim(), (16, 512, 512, 3));
    let start = (clip[[0, 0, 0, 2]] * 31.0).round() as usize;
    for f in 0..16 {
        assert_eq!(clip[[f, 0, 0, 2]], video.frames[[start + f, 0, 0, 2]]);
    }
    for x in 0..512 {
        assert_eq!(
            clip[[3, 7, x, 0]],
            video.frames[[0, 0, 256 + x, 0]],
            "column {x}"
        );
    }
    for y in 0..512 {
        assert_eq!(clip[[3, y, 5, 1]], video.frames[[0, y, 0, 1]]);
    }
}

fn corpus_video(spec: &CorpusSpec, seed: u64, index: usize) -> RawVideo {
    generate_synthetic_corpus(spec, seed)
        .unwrap()
        .videos
        .swap_remove(index)
}

#[test]
fn single_face_video_gives_five_crops_from_distinct_frames() {
    let video = corpus_video(&CorpusSpec::simple(1, 0), 4, 0);
    let pool = build_face_pool(
        &video,
        &DiskDetector::default(),
        &mut rng_for(1, Stream::Pool, 0),
        &PoolConfig::default(),
    )
    .unwrap();
    assert_eq!(pool.len(), 5);
    assert_eq!(pool.source_frames.iter().collect::<BTreeSet<_>>().len(), 5);
    assert!(pool.crops.iter().all(|c| c.dim() == (224, 224, 3)));
}

#[test]
fn crops_avoid_the_two_face_prefix() {
    let spec = CorpusSpec {
        frames: 20,
        partial_multi_face: vec![PartialMultiFace {
            video: 0,
            start: 0,
            end: 10,
        }],
        ..CorpusSpec::simple(1, 0)
    };
    let corpus = generate_synthetic_corpus(&spec, 9).unwrap();
    assert_eq!(
        corpus.truth.videos[0].multi_face_frames,
        (0..10).collect::<Vec<_>>()
    );
    for seed in 0..20 {
        let pool = build_face_pool(
            &corpus.videos[0],
            &DiskDetector::default(),
            &mut rng_for(seed, Stream::Pool, 0),
            &PoolConfig::default(),
        )
        .unwrap();
        assert!(
            pool.source_frames.iter().all(|&f| f >= 10),
            "{:?}",
            pool.source_frames
        );
    }
}

#[test]
fn reference_draws_are_near_uniform() {
    let video = corpus_video(&CorpusSpec::simple(1, 0), 4, 0);
    let pool = build_face_pool(
        &video,
        &DiskDetector::default(),
        &mut rng_for(1, Stream::Pool, 0),
        &PoolConfig::default(),
    )
    .unwrap();
    assert_eq!(pool.len(), 5);
    let n = 10_000;
    let mut counts = [0usize; 5];
    for i in 0..n {
        let (k, _) = sample_random_reference(&pool, &mut rng_for(0, Stream::Reference, i)).unwrap();
        counts[k] += 1;
    }
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((0.17..=0.23).contains(&f), "{counts:?}");
    }
}

#[test]
fn built_dataset_matches_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic_corpus(
        &CorpusSpec {
            partial_multi_face: vec![PartialMultiFace {
                video: 1,
                start: 0,
                end: 6,
            }],
            ..CorpusSpec::simple(10, 3)
        },
        21,
    )
    .unwrap();
    write_corpus(&corpus, &dir.path().join("raw")).unwrap();
    let manifest = dir.path().join("out").join("manifest.jsonl");
    let summary = build_dataset(&dir.path().join("raw"), &manifest, &BuildConfig::ci()).unwrap();
    assert_eq!((summary.report.kept, summary.report.dropped), (7, 3));

    let single: BTreeSet<&str> = corpus
        .truth
        .videos
        .iter()
        .filter(|v| !v.two_person)
        .map(|v| v.video_id.as_str())
        .collect();
    let records = read_manifest(&manifest).unwrap();
    let kept: BTreeSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    assert_eq!(kept, single);

    for r in &records {
        let truth = corpus
            .truth
            .videos
            .iter()
            .find(|v| v.video_id == r.video_id)
            .unwrap();
        let pool = read_pool(&dir.path().join("out").join(&r.face_pool_path)).unwrap();
        for &f in &pool.source_frames {
            assert!(
                !truth.multi_face_frames.contains(&f),
                "{}: crop from frame {f}",
                r.video_id
            );
        }
        for d in &pool.detections {
            let planted = truth.faces[d.frame_index].len();
            assert_eq!(d.n_faces, planted, "{} frame {}", r.video_id, d.frame_index);
        }
        assert_eq!(
            pool.source_frames.iter().collect::<BTreeSet<_>>().len(),
            pool.len()
        );
    }
}

#[test]
fn pool_target_two_caps_pools() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic_corpus(&CorpusSpec::simple(3, 0), 2).unwrap();
    write_corpus(&corpus, &dir.path().join("raw")).unwrap();
    let mut cfg = BuildConfig::ci();
    cfg.pool.pool_target = 2;
    let manifest = dir.path().join("m.jsonl");
    build_dataset(&dir.path().join("raw"), &manifest, &cfg).unwrap();
    assert!(read_manifest(&manifest)
        .unwrap()
        .iter()
        .all(|r| (1..=2).contains(&r.n_pool)));
}

fn record() -> impl Strategy<Value = DatasetRecord> {
    ("[a-z0-9_]{1,12}", "[ -~]{0,40}", 1usize..9).prop_map(|(id, caption, n)| DatasetRecord {
        clip_path: format!("clips/{id}"),
        face_pool_path: format!("pools/{id}"),
        video_id: id,
        unified_caption: caption,
        n_pool: n,
        captions: None,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn manifest_round_trip_is_identity(records in prop::collection::vec(record(), 0..6)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_manifest(&records, &p).unwrap();
        prop_assert_eq!(read_manifest(&p).unwrap(), records);
    }

    #[test]
    fn clip_shape_follows_config(t in 1usize..6, extra in 0usize..4, size in 1usize..24, h in 4usize..20, w in 4usize..20, seed in 0u64..100) {
        let frames = Array4::from_shape_fn((t + extra, h, w, 3), |(f, y, x, c)| ((f + y + x + c) % 7) as f32 / 7.0);
        let video = RawVideo::new("v", frames).unwrap();
        let cfg = ClipConfig { clip_length: t, size };
        let clip = clip_and_resize(&video, cfg, &mut rng_for(seed, Stream::Clip, 0)).unwrap();
        prop_assert_eq!(clip.dim(), (t, size, size, 3));
    }

    #[test]
    fn pools_never_use_multi_face_frames(seed in 0u64..50) {
        let spec = CorpusSpec {
            partial_multi_face: vec![PartialMultiFace { video: 0, start: 2, end: 12 }],
            ..CorpusSpec::simple(2, 1)
        };
        let corpus = generate_synthetic_corpus(&spec, seed).unwrap();
        for (video, truth) in corpus.videos.iter().zip(&corpus.truth.videos) {
            if let Ok(pool) = build_face_pool(video, &DiskDetector::default(), &mut rng_for(seed, Stream::Pool, 0), &PoolConfig::ci()) {
                for &f in &pool.source_frames {
                    prop_assert!(!truth.multi_face_frames.contains(&f));
                }
                prop_assert_eq!(pool.source_frames.iter().collect::<BTreeSet<_>>().len(), pool.len());
            }
        }
    }
}
