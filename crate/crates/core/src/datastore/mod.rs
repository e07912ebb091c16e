//! Feature ingestion, manifests and synthetic corpora.

pub mod cfv;
pub mod manifest;
pub mod synth;

use std::collections::BTreeMap;
use std::ops::Range;

pub use cfv::{read_feature_file, write_feature_file, FeatureMatrix};
pub use manifest::{read_manifest, read_manifest_records, write_manifest, ManifestRecord};
pub use synth::{synthesize_corpus, SynthCorpus, SynthSpec};

use crate::error::{Error, Result};
use crate::span::Span;
use crate::vector::Embeddings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceKind {
    Video,
    /// Row 0 is the sentence-level [CLS] embedding.
    Query,
}

#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub features: Embeddings,
    pub fps: f64,
    pub kind: SequenceKind,
}

impl FeatureSequence {
    pub fn new(features: Embeddings, fps: f64, kind: SequenceKind) -> Self {
        Self {
            features,
            fps,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    pub fn cls(&self) -> &[f64] {
        self.features.row(0)
    }
}

#[derive(Debug, Clone)]
pub struct GroundingInstance {
    pub query_id: String,
    pub video_id: String,
    pub query: FeatureSequence,
    pub gt: Span,
}

/// Videos keyed by id plus the query instances that reference them.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub videos: BTreeMap<String, FeatureSequence>,
    pub instances: Vec<GroundingInstance>,
}

impl Corpus {
    pub fn video(&self, id: &str) -> Result<&FeatureSequence> {
        self.videos
            .get(id)
            .ok_or_else(|| Error::UnknownVideo(id.to_string()))
    }

    /// Keeps only the instances selected by `keep`, in order.
    pub fn subset(&self, keep: &[usize]) -> Corpus {
        Corpus {
            videos: self.videos.clone(),
            instances: keep.iter().map(|&i| self.instances[i].clone()).collect(),
        }
    }
}

/// Feature rows covered by a span of seconds: floor(start) .. ceil(end), at least one row.
pub fn feature_range(span: &Span, fps: f64, len: usize) -> Range<usize> {
    let mut lo = ((span.start * fps) + 1e-9).floor().max(0.0) as usize;
    let hi = (((span.end * fps) - 1e-9).ceil().max(0.0) as usize).min(len);
    lo = lo.min(len.saturating_sub(1));
    if hi <= lo {
        return lo..(lo + 1).min(len);
    }
    lo..hi
}
