//! JSONL dataset manifests and corpus loading.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cfv::read_feature_file;
use super::{Corpus, FeatureSequence, GroundingInstance, SequenceKind};
use crate::error::{Error, Result};
use crate::span::Span;

/// One manifest line. Feature paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub query_id: String,
    pub video_id: String,
    pub query_feature_file: String,
    pub video_feature_file: String,
    pub gt_start_sec: f64,
    pub gt_end_sec: f64,
    pub fps: f64,
}

const FIELDS: [&str; 7] = [
    "query_id",
    "video_id",
    "query_feature_file",
    "video_feature_file",
    "gt_start_sec",
    "gt_end_sec",
    "fps",
];

/// Parses manifest lines without touching the referenced feature files.
pub fn read_manifest_records(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

fn parse_record(line: &str, lineno: usize) -> Result<ManifestRecord> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: lineno,
            message: e.to_string(),
        })?;
    let obj = value.as_object().ok_or_else(|| Error::MalformedLine {
        line: lineno,
        message: "expected a JSON object".into(),
    })?;
    if let Some(field) = FIELDS.iter().find(|f| !obj.contains_key(**f)) {
        return Err(Error::MissingField {
            line: lineno,
            field: field.to_string(),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::MalformedLine {
        line: lineno,
        message: e.to_string(),
    })
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a manifest, resolves every feature file and validates ground truth.
pub fn read_manifest(path: impl AsRef<Path>, normalize: bool) -> Result<Corpus> {
    let path = path.as_ref();
    let records = read_manifest_records(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    load_records(&records, &base, normalize)
}

fn resolve(base: &Path, rel: &str, line: usize) -> Result<super::cfv::FeatureMatrix> {
    let p: PathBuf = base.join(rel);
    read_feature_file(&p).map_err(|e| Error::UnresolvedFeatureFile {
        line,
        path: p,
        source: Box::new(e),
    })
}

pub(crate) fn load_records(
    records: &[ManifestRecord],
    base: &Path,
    normalize: bool,
) -> Result<Corpus> {
    let mut videos: BTreeMap<String, FeatureSequence> = BTreeMap::new();
    let mut instances = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        if !(r.fps.is_finite() && r.fps > 0.0) {
            return Err(Error::MalformedLine {
                line,
                message: format!("fps must be positive, got {}", r.fps),
            });
        }
        let video = match videos.get(&r.video_id) {
            Some(v) => {
                if v.fps != r.fps {
                    return Err(Error::InconsistentFps {
                        video_id: r.video_id.clone(),
                        expected: v.fps,
                        found: r.fps,
                    });
                }
                v
            }
            None => {
                let m = resolve(base, &r.video_feature_file, line)?;
                let seq =
                    FeatureSequence::new(m.to_embeddings(normalize), r.fps, SequenceKind::Video);
                videos.entry(r.video_id.clone()).or_insert(seq)
            }
        };
        let duration = video.duration();
        let video_dim = video.features.dim();
        let gt = Span::new(r.gt_start_sec, r.gt_end_sec).map_err(|_| Error::GtOutOfRange {
            query_id: r.query_id.clone(),
            start: r.gt_start_sec,
            end: r.gt_end_sec,
            duration,
        })?;
        if gt.start < 0.0 || gt.end > duration + 1e-9 || gt.start >= gt.end {
            return Err(Error::GtOutOfRange {
                query_id: r.query_id.clone(),
                start: gt.start,
                end: gt.end,
                duration,
            });
        }
        let q = resolve(base, &r.query_feature_file, line)?;
        if q.dim() != video_dim {
            return Err(Error::DimensionMismatch {
                expected: video_dim,
                actual: q.dim(),
            });
        }
        if q.is_empty() {
            return Err(Error::MalformedLine {
                line,
                message: "query feature file has no [CLS] row".into(),
            });
        }
        instances.push(GroundingInstance {
            query_id: r.query_id.clone(),
            video_id: r.video_id.clone(),
            query: FeatureSequence::new(q.to_embeddings(normalize), r.fps, SequenceKind::Query),
            gt,
        });
    }
    Ok(Corpus { videos, instances })
}
