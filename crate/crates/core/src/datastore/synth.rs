//! Synthetic corpora with planted ground-truth moments.
//!
//! Every query draws a unit direction `u`. Frames inside its planted span are
//! `normalize(alpha * u + (1 - alpha) * g)` with `g ~ N(0, I/d)`; all other
//! frames are normalized pure noise. The query's [CLS] row is `u`, followed by
//! `query_tokens` noise rows. Moments of different queries in one video are
//! drawn inside disjoint equal-length segments so they never overlap.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::cfv::{write_feature_file, FeatureMatrix};
use super::manifest::{write_manifest, ManifestRecord};
use super::{Corpus, FeatureSequence, GroundingInstance, SequenceKind};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::span::Span;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub video_length_features: usize,
    pub dim: usize,
    pub queries_per_video: usize,
    pub moment_length_min: usize,
    pub moment_length_max: usize,
    /// Mixing weight of the planted direction, in `[0, 1]`.
    pub signal_strength: f64,
    pub noise_seed: u64,
    pub fps: f64,
    pub query_tokens: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 10,
            video_length_features: 900,
            dim: 64,
            queries_per_video: 3,
            moment_length_min: 20,
            moment_length_max: 40,
            signal_strength: 1.0,
            noise_seed: 0,
            fps: 1.875,
            query_tokens: 4,
        }
    }
}

const KEYS: [&str; 10] = [
    "num_videos",
    "video_length_features",
    "dim",
    "queries_per_video",
    "moment_length_min",
    "moment_length_max",
    "signal_strength",
    "noise_seed",
    "fps",
    "query_tokens",
];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_videos == 0 || self.queries_per_video == 0 {
            return bad("num_videos and queries_per_video must be >= 1");
        }
        if self.dim == 0 || self.video_length_features == 0 {
            return bad("dim and video_length_features must be >= 1");
        }
        if self.moment_length_min == 0 || self.moment_length_min > self.moment_length_max {
            return bad("need 1 <= moment_length_min <= moment_length_max");
        }
        if self.moment_length_max > self.video_length_features / self.queries_per_video {
            return bad("moments must fit in video_length_features / queries_per_video");
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad("signal_strength must lie in [0, 1]");
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive");
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(&KEYS)
            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let d = Self::default();
        let spec = Self {
            num_videos: kv.get_or("num_videos", d.num_videos)?,
            video_length_features: kv.get_or("video_length_features", d.video_length_features)?,
            dim: kv.get_or("dim", d.dim)?,
            queries_per_video: kv.get_or("queries_per_video", d.queries_per_video)?,
            moment_length_min: kv.get_or("moment_length_min", d.moment_length_min)?,
            moment_length_max: kv.get_or("moment_length_max", d.moment_length_max)?,
            signal_strength: kv.get_or("signal_strength", d.signal_strength)?,
            noise_seed: kv.get_or("noise_seed", d.noise_seed)?,
            fps: kv.get_or("fps", d.fps)?,
            query_tokens: kv.get_or("query_tokens", d.query_tokens)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("num_videos", self.num_videos);
        kv.set("video_length_features", self.video_length_features);
        kv.set("dim", self.dim);
        kv.set("queries_per_video", self.queries_per_video);
        kv.set("moment_length_min", self.moment_length_min);
        kv.set("moment_length_max", self.moment_length_max);
        kv.set("signal_strength", self.signal_strength);
        kv.set("noise_seed", self.noise_seed);
        kv.set("fps", self.fps);
        kv.set("query_tokens", self.query_tokens);
        kv
    }
}

/// Generated features and manifest, held in memory until written.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub videos: Vec<(String, FeatureMatrix)>,
    pub queries: Vec<(String, FeatureMatrix)>,
    pub records: Vec<ManifestRecord>,
}

fn noise_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn to_f32(rows: &[Vec<f64>], dim: usize) -> FeatureMatrix {
    let data = rows.iter().flatten().map(|&x| x as f32).collect();
    FeatureMatrix::new(dim, data).expect("rows have uniform dim")
}

pub fn synthesize_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let d = spec.dim;
    let len = spec.video_length_features;
    let segment = len / spec.queries_per_video;
    let alpha = spec.signal_strength;

    let mut videos = Vec::new();
    let mut queries = Vec::new();
    let mut records = Vec::new();
    for v in 0..spec.num_videos {
        let video_id = format!("v{v:04}");
        let mut frames: Vec<Vec<f64>> = (0..len)
            .map(|_| normalized(noise_vector(&mut rng, d)))
            .collect();
        for q in 0..spec.queries_per_video {
            let query_id = format!("{video_id}_q{q:02}");
            let u = normalized(
                (0..d)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            let moment = rng.random_range(spec.moment_length_min..=spec.moment_length_max);
            let seg_start = q * segment;
            let start = seg_start + rng.random_range(0..=segment - moment);
            for frame in &mut frames[start..start + moment] {
                let g = noise_vector(&mut rng, d);
                *frame = normalized(
                    u.iter()
                        .zip(&g)
                        .map(|(ui, gi)| alpha * ui + (1.0 - alpha) * gi)
                        .collect(),
                );
            }
            let mut qrows = vec![u];
            for _ in 0..spec.query_tokens {
                qrows.push(normalized(noise_vector(&mut rng, d)));
            }
            let query_file = format!("queries/{query_id}.cfv");
            queries.push((query_id.clone(), to_f32(&qrows, d)));
            records.push(ManifestRecord {
                query_id,
                video_id: video_id.clone(),
                query_feature_file: query_file,
                video_feature_file: format!("videos/{video_id}.cfv"),
                gt_start_sec: start as f64 / spec.fps,
                gt_end_sec: (start + moment) as f64 / spec.fps,
                fps: spec.fps,
            });
        }
        videos.push((video_id, to_f32(&frames, d)));
    }
    Ok(SynthCorpus {
        spec: spec.clone(),
        videos,
        queries,
        records,
    })
}

impl SynthCorpus {
    /// Writes `videos/*.cfv`, `queries/*.cfv` and `manifest.jsonl` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (id, m) in &self.videos {
            write_feature_file(dir.join(format!("videos/{id}.cfv")), m)?;
        }
        for (id, m) in &self.queries {
            write_feature_file(dir.join(format!("queries/{id}.cfv")), m)?;
        }
        write_manifest(dir.join("manifest.jsonl"), &self.records)
    }

    /// Builds the in-memory corpus exactly as reading the written files would.
    pub fn to_corpus(&self, normalize: bool) -> Corpus {
        let mut corpus = Corpus::default();
        for (id, m) in &self.videos {
            corpus.videos.insert(
                id.clone(),
                FeatureSequence::new(
                    m.to_embeddings(normalize),
                    self.spec.fps,
                    SequenceKind::Video,
                ),
            );
        }
        for ((_, q), r) in self.queries.iter().zip(&self.records) {
            corpus.instances.push(GroundingInstance {
                query_id: r.query_id.clone(),
                video_id: r.video_id.clone(),
                query: FeatureSequence::new(q.to_embeddings(normalize), r.fps, SequenceKind::Query),
                gt: Span {
                    start: r.gt_start_sec,
                    end: r.gt_end_sec,
                },
            });
        }
        corpus
    }
}
