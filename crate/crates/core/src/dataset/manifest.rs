use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caption::CaptionTriple;

use super::pool::{read_pool, validate_pool};
use super::{io_err, json_err, DatasetError};

/// One training video. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub video_id: String,
    pub clip_path: String,
    #[serde(default)]
    pub unified_caption: String,
    pub face_pool_path: String,
    pub n_pool: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<CaptionTriple>,
}

impl DatasetRecord {
    fn check(&self) -> Result<(), String> {
        if self.video_id.is_empty() {
            return Err("empty video_id".into());
        }
        if self.clip_path.is_empty() || self.face_pool_path.is_empty() {
            return Err(format!(
                "{}: empty clip_path or face_pool_path",
                self.video_id
            ));
        }
        if self.n_pool == 0 {
            return Err(format!("{}: n_pool must be at least 1", self.video_id));
        }
        if let Some(c) = &self.captions {
            if c.attribute.is_empty() || c.action.is_empty() || c.unified.is_empty() {
                return Err(format!(
                    "{}: caption triple has an empty part",
                    self.video_id
                ));
            }
            if c.unified != self.unified_caption {
                return Err(format!(
                    "{}: unified_caption differs from caption triple",
                    self.video_id
                ));
            }
        }
        Ok(())
    }
}

/// JSONL, one record per line, written to a temp file and renamed.
pub fn write_manifest(records: &[DatasetRecord], path: &Path) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("jsonl.partial");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(json_err(path))?;
        writeln!(f, "{line}").map_err(io_err(&tmp))?;
    }
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Parse and structurally validate a manifest. Errors carry the 1-based
/// line number. Blank lines are ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| DatasetError::Manifest {
            path: path.into(),
            line: i + 1,
            message,
        };
        let r: DatasetRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        r.check().map_err(err)?;
        out.push(r);
    }
    Ok(out)
}

/// File-level checks against `root`: clip frames and pool exist, the pool
/// holds `n_pool` crops and passes its own invariants.
pub fn validate_record(record: &DatasetRecord, root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    if let Err(e) = record.check() {
        out.push(e);
    }
    let clip = root.join(&record.clip_path);
    if !clip.join("frame_0000.png").is_file() {
        out.push(format!(
            "{}: clip {} has no frames",
            record.video_id,
            clip.display()
        ));
    }
    match read_pool(&root.join(&record.face_pool_path)) {
        Err(e) => out.push(format!("{}: {e}", record.video_id)),
        Ok(pool) => {
            if pool.len() != record.n_pool {
                out.push(format!(
                    "{}: n_pool is {} but the pool holds {} crops",
                    record.video_id,
                    record.n_pool,
                    pool.len()
                ));
            }
            if pool.video_id != record.video_id {
                out.push(format!(
                    "{}: pool belongs to {}",
                    record.video_id, pool.video_id
                ));
            }
            out.extend(
                validate_pool(&pool)
                    .into_iter()
                    .map(|m| format!("{}: {m}", record.video_id)),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize) -> DatasetRecord {
        DatasetRecord {
            video_id: format!("vid_{i:03}"),
            clip_path: format!("clips/vid_{i:03}"),
            unified_caption: if i == 1 {
                "a person waves".into()
            } else {
                String::new()
            },
            face_pool_path: format!("pools/vid_{i:03}"),
            n_pool: 1 + i,
            captions: None,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs: Vec<_> = (0..3).map(rec).collect();
        write_manifest(&recs, &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), recs);
    }

    #[test]
    fn bad_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&rec(0)).unwrap();
        fs::write(&p, format!("{good}\n{{not json\n{good}\n")).unwrap();
        match read_manifest(&p) {
            Err(DatasetError::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let mut bad = rec(0);
        bad.n_pool = 0;
        fs::write(
            &p,
            format!("{good}\n{}\n", serde_json::to_string(&bad).unwrap()),
        )
        .unwrap();
        assert!(read_manifest(&p).unwrap_err().to_string().contains(":2:"));
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        assert!(read_manifest(&p).unwrap().is_empty());
    }
}
