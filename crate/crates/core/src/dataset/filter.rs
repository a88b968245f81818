use serde::{Deserialize, Serialize};

use super::pool::FacePool;

/// Detection evidence for one video, taken from its pool construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCandidate {
    pub video_id: String,
    pub attempted_frames: usize,
    pub multi_face_frames: usize,
    pub pool_size: usize,
}

impl From<&FacePool> for FilterCandidate {
    fn from(p: &FacePool) -> Self {
        Self {
            video_id: p.video_id.clone(),
            attempted_frames: p.detections.len(),
            multi_face_frames: p.multi_face_attempts(),
            pool_size: p.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    MultiFace {
        multi_face_frames: usize,
        attempted_frames: usize,
    },
    EmptyPool {
        attempted_frames: usize,
    },
    Skipped {
        message: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: usize,
    pub reasons: Vec<(String, DropReason)>,
}

impl FilterReport {
    /// Record a video dropped before it reached the filter.
    pub fn skip(&mut self, video_id: &str, message: impl Into<String>) {
        self.dropped += 1;
        self.reasons.push((
            video_id.to_string(),
            DropReason::Skipped {
                message: message.into(),
            },
        ));
    }
}

/// Drop videos whose examined frames showed two or more faces in a strict
/// majority, and videos whose pool came out empty. Input order is kept.
pub fn filter_multi_face_videos(
    candidates: Vec<FilterCandidate>,
) -> (Vec<FilterCandidate>, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::with_capacity(candidates.len());
    for c in candidates {
        let reason = if 2 * c.multi_face_frames > c.attempted_frames {
            Some(DropReason::MultiFace {
                multi_face_frames: c.multi_face_frames,
                attempted_frames: c.attempted_frames,
            })
        } else if c.pool_size == 0 {
            Some(DropReason::EmptyPool {
                attempted_frames: c.attempted_frames,
            })
        } else {
            None
        };
        match reason {
            Some(r) => {
                report.dropped += 1;
                report.reasons.push((c.video_id.clone(), r));
            }
            None => {
                report.kept += 1;
                kept.push(c);
            }
        }
    }
    (kept, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: &str, attempted: usize, multi: usize, pool: usize) -> FilterCandidate {
        FilterCandidate {
            video_id: id.into(),
            attempted_frames: attempted,
            multi_face_frames: multi,
            pool_size: pool,
        }
    }

    #[test]
    fn majority_multi_face_is_dropped() {
        let (kept, report) = filter_multi_face_videos(vec![
            cand("a", 5, 0, 5),
            cand("b", 15, 15, 0),
            cand("c", 10, 5, 5),
            cand("d", 9, 5, 4),
        ]);
        assert_eq!(
            kept.iter().map(|c| c.video_id.as_str()).collect::<Vec<_>>(),
            ["a", "c"]
        );
        assert_eq!((report.kept, report.dropped), (2, 2));
    }

    #[test]
    fn empty_pool_is_dropped_and_empty_corpus_is_fine() {
        let (kept, report) = filter_multi_face_videos(vec![cand("blank", 15, 0, 0)]);
        assert!(kept.is_empty());
        assert!(matches!(report.reasons[0].1, DropReason::EmptyPool { .. }));
        let (kept, report) = filter_multi_face_videos(vec![]);
        assert!(kept.is_empty());
        assert_eq!(report, FilterReport::default());
    }
}
