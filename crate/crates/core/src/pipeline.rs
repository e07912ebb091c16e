//! End-to-end grounding: slice, select, score, fuse, suppress.
//!
//! Per-video preparation (adapting every frame and building prefix sums) is
//! query independent and done once per video, outside the timed stages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_samples, train_adapter, AdapterParams, AdapterTrainConfig};
use crate::datastore::{Corpus, GroundingInstance};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::optim::{stage_seed, OptimizerKind, TrainHistory};
use crate::ranking::{fuse_and_rank, nms_limit, Candidate, Fusion, NormalizationPool};
use crate::scorer::{
    enumerate_proposals, load_external_scores, score_ranges, train_scorer, ExternalScore, IouScale,
    JointTrainConfig, Proposal, ScorerParams,
};
use crate::selection::{select_top_k, window_scores};
use crate::span::Span;
use crate::vector::{dot_unchecked, Embeddings, PrefixSums};
use crate::windowing::slice_windows;

/// Number of windows kept by selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowCount {
    /// 10 below 3 fps, 30 otherwise.
    Auto,
    All,
    Fixed(usize),
}

impl FromStr for WindowCount {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Self::Auto),
            "all" => Ok(Self::All),
            n => match n.parse::<usize>() {
                Ok(0) => Err("window count must be >= 1".into()),
                Ok(k) => Ok(Self::Fixed(k)),
                Err(_) => Err(format!(
                    "expected auto, all or a positive integer, got `{n}`"
                )),
            },
        }
    }
}

impl fmt::Display for WindowCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::All => f.write_str("all"),
            Self::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl WindowCount {
    pub fn resolve(self, fps: f64, n_windows: usize) -> usize {
        let k = match self {
            Self::Auto if fps < 3.0 => 10,
            Self::Auto => 30,
            Self::All => n_windows,
            Self::Fixed(k) => k,
        };
        k.min(n_windows)
    }
}

/// `auto` or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AutoOr<T> {
    Auto,
    Value(T),
}

impl<T: FromStr> FromStr for AutoOr<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        s.parse()
            .map(Self::Value)
            .map_err(|e: T::Err| e.to_string())
    }
}

impl<T: fmt::Display> fmt::Display for AutoOr<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Value(v) => v.fmt(f),
        }
    }
}

/// Default window length: 90 features below 3 fps, 125 otherwise.
pub fn default_window_length(fps: f64) -> usize {
    if fps < 3.0 {
        90
    } else {
        125
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub window_length: AutoOr<usize>,
    pub top_k_windows: WindowCount,
    pub nms_iou_threshold: f64,
    pub prediction_count: usize,
    pub lambda_con: f64,
    pub lambda_adapt: f64,
    pub scorer_learning_rate: f64,
    pub adapter_learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub normalize_features: bool,
    pub iou_strict: bool,
    pub normalization_pool: NormalizationPool,
    pub fusion: Fusion,
    pub use_adapter: bool,
    pub adapter_hidden: AutoOr<usize>,
    pub adapter_epochs: usize,
    pub adapter_patience: usize,
    pub scorer_epochs: usize,
    pub scorer_patience: usize,
    pub optimizer: OptimizerKind,
    pub joint: bool,
    pub positive_iou_threshold: f64,
    pub iou_t_min: f64,
    pub iou_t_max: f64,
    pub eval_k: Vec<usize>,
    pub eval_thresholds: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_length: AutoOr::Auto,
            top_k_windows: WindowCount::Auto,
            nms_iou_threshold: 0.5,
            prediction_count: 5,
            lambda_con: 1.0,
            lambda_adapt: 0.2,
            scorer_learning_rate: 1e-4,
            adapter_learning_rate: 1e-5,
            batch_size: 32,
            seed: 0,
            normalize_features: true,
            iou_strict: true,
            normalization_pool: NormalizationPool::Global,
            fusion: Fusion::Sum,
            use_adapter: true,
            adapter_hidden: AutoOr::Auto,
            adapter_epochs: 50,
            adapter_patience: 5,
            scorer_epochs: 200,
            scorer_patience: 10,
            optimizer: OptimizerKind::Sgd,
            joint: false,
            positive_iou_threshold: 0.7,
            iou_t_min: 0.3,
            iou_t_max: 0.7,
            eval_k: vec![1, 5],
            eval_thresholds: vec![0.3, 0.5],
        }
    }
}

pub const CONFIG_KEYS: [&str; 27] = [
    "window_length",
    "top_k_windows",
    "nms_iou_threshold",
    "prediction_count",
    "lambda_con",
    "lambda_adapt",
    "scorer_learning_rate",
    "adapter_learning_rate",
    "batch_size",
    "seed",
    "normalize_features",
    "iou_strict",
    "normalization_pool",
    "fusion",
    "use_adapter",
    "adapter_hidden",
    "adapter_epochs",
    "adapter_patience",
    "scorer_epochs",
    "scorer_patience",
    "optimizer",
    "joint",
    "positive_iou_threshold",
    "iou_t_min",
    "iou_t_max",
    "eval_k",
    "eval_thresholds",
];

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: bad list item `{}`", x.trim())))
        })
        .collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl PipelineConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(&CONFIG_KEYS)?;
        let d = Self::default();
        let cfg = Self {
            window_length: kv.get_or("window_length", d.window_length)?,
            top_k_windows: kv.get_or("top_k_windows", d.top_k_windows)?,
            nms_iou_threshold: kv.get_or("nms_iou_threshold", d.nms_iou_threshold)?,
            prediction_count: kv.get_or("prediction_count", d.prediction_count)?,
            lambda_con: kv.get_or("lambda_con", d.lambda_con)?,
            lambda_adapt: kv.get_or("lambda_adapt", d.lambda_adapt)?,
            scorer_learning_rate: kv.get_or("scorer_learning_rate", d.scorer_learning_rate)?,
            adapter_learning_rate: kv.get_or("adapter_learning_rate", d.adapter_learning_rate)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            seed: kv.get_or("seed", d.seed)?,
            normalize_features: kv.get_or("normalize_features", d.normalize_features)?,
            iou_strict: kv.get_or("iou_strict", d.iou_strict)?,
            normalization_pool: kv.get_or("normalization_pool", d.normalization_pool)?,
            fusion: kv.get_or("fusion", d.fusion)?,
            use_adapter: kv.get_or("use_adapter", d.use_adapter)?,
            adapter_hidden: kv.get_or("adapter_hidden", d.adapter_hidden)?,
            adapter_epochs: kv.get_or("adapter_epochs", d.adapter_epochs)?,
            adapter_patience: kv.get_or("adapter_patience", d.adapter_patience)?,
            scorer_epochs: kv.get_or("scorer_epochs", d.scorer_epochs)?,
            scorer_patience: kv.get_or("scorer_patience", d.scorer_patience)?,
            optimizer: kv.get_or("optimizer", d.optimizer)?,
            joint: kv.get_or("joint", d.joint)?,
            positive_iou_threshold: kv
                .get_or("positive_iou_threshold", d.positive_iou_threshold)?,
            iou_t_min: kv.get_or("iou_t_min", d.iou_t_min)?,
            iou_t_max: kv.get_or("iou_t_max", d.iou_t_max)?,
            eval_k: match kv.get("eval_k") {
                Some(v) => parse_list("eval_k", v)?,
                None => d.eval_k,
            },
            eval_thresholds: match kv.get("eval_thresholds") {
                Some(v) => parse_list("eval_thresholds", v)?,
                None => d.eval_thresholds,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("window_length", self.window_length);
        kv.set("top_k_windows", self.top_k_windows);
        kv.set("nms_iou_threshold", self.nms_iou_threshold);
        kv.set("prediction_count", self.prediction_count);
        kv.set("lambda_con", self.lambda_con);
        kv.set("lambda_adapt", self.lambda_adapt);
        kv.set("scorer_learning_rate", self.scorer_learning_rate);
        kv.set("adapter_learning_rate", self.adapter_learning_rate);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("normalize_features", self.normalize_features);
        kv.set("iou_strict", self.iou_strict);
        kv.set("normalization_pool", self.normalization_pool);
        kv.set("fusion", self.fusion);
        kv.set("use_adapter", self.use_adapter);
        kv.set("adapter_hidden", self.adapter_hidden);
        kv.set("adapter_epochs", self.adapter_epochs);
        kv.set("adapter_patience", self.adapter_patience);
        kv.set("scorer_epochs", self.scorer_epochs);
        kv.set("scorer_patience", self.scorer_patience);
        kv.set("optimizer", self.optimizer);
        kv.set("joint", self.joint);
        kv.set("positive_iou_threshold", self.positive_iou_threshold);
        kv.set("iou_t_min", self.iou_t_min);
        kv.set("iou_t_max", self.iou_t_max);
        kv.set("eval_k", join(&self.eval_k));
        kv.set("eval_thresholds", join(&self.eval_thresholds));
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if let AutoOr::Value(l) = self.window_length {
            if l < 2 {
                return bad("window_length must be >= 2");
            }
        }
        if !(0.0..=1.0).contains(&self.nms_iou_threshold) {
            return bad("nms_iou_threshold must lie in [0, 1]");
        }
        if self.prediction_count == 0 {
            return bad("prediction_count must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.eval_k.is_empty() || self.eval_k.contains(&0) || self.eval_thresholds.is_empty() {
            return bad("eval_k and eval_thresholds need at least one entry, k >= 1");
        }
        if self.adapter_hidden == AutoOr::Value(0) {
            return bad("adapter_hidden must be >= 1");
        }
        self.joint_config(90).validate()
    }

    pub fn window_length_for(&self, fps: f64) -> usize {
        match self.window_length {
            AutoOr::Auto => default_window_length(fps),
            AutoOr::Value(l) => l,
        }
    }

    pub fn adapter_config(&self) -> AdapterTrainConfig {
        AdapterTrainConfig {
            learning_rate: self.adapter_learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.adapter_epochs,
            early_stop_patience: self.adapter_patience,
            seed: stage_seed(self.seed, "adapter"),
            lambda_adapt: self.lambda_adapt,
            hidden: match self.adapter_hidden {
                AutoOr::Auto => None,
                AutoOr::Value(h) => Some(h),
            },
            optimizer: self.optimizer,
        }
    }

    pub fn joint_config(&self, window_length: usize) -> JointTrainConfig {
        JointTrainConfig {
            learning_rate: self.scorer_learning_rate,
            adapter_learning_rate: self.adapter_learning_rate,
            lambda_con: self.lambda_con,
            lambda_adapt: self.lambda_adapt,
            positive_iou_threshold: self.positive_iou_threshold,
            iou_scale: IouScale {
                t_min: self.iou_t_min,
                t_max: self.iou_t_max,
            },
            batch_size: self.batch_size,
            seed: stage_seed(self.seed, "scorer"),
            max_epochs: self.scorer_epochs,
            early_stop_patience: self.scorer_patience,
            window_length,
            optimizer: self.optimizer,
            joint: self.joint,
        }
    }
}

/// Frame rate used to resolve fps-dependent defaults for a corpus.
pub fn corpus_fps(corpus: &Corpus) -> f64 {
    corpus.videos.values().next().map_or(1.0, |v| v.fps)
}

/// Trained parameters for the grounding pipeline.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub adapter: AdapterParams,
    pub scorer: ScorerParams,
    pub adapter_history: Option<TrainHistory>,
    pub scorer_history: TrainHistory,
}

/// Trains the adapter (unless disabled), then the scorer on adapted features.
pub fn train_models(corpus: &Corpus, cfg: &PipelineConfig) -> Result<TrainedModels> {
    cfg.validate()?;
    let dim = corpus
        .instances
        .first()
        .map(|i| i.query.features.dim())
        .ok_or_else(|| Error::InsufficientData("empty corpus".into()))?;
    let acfg = cfg.adapter_config();
    let hidden = acfg.hidden.unwrap_or((dim / 4).max(1));
    let (adapter, adapter_history) = if cfg.use_adapter {
        let samples = adapter_samples(corpus)?;
        let report = train_adapter(&samples, &acfg)?;
        (report.params, Some(report.history))
    } else {
        (AdapterParams::zeros(dim, hidden), None)
    };
    let jcfg = cfg.joint_config(cfg.window_length_for(corpus_fps(corpus)));
    let report = train_scorer(corpus, &adapter, &jcfg)?;
    Ok(TrainedModels {
        adapter: if cfg.use_adapter {
            report.adapter
        } else {
            adapter
        },
        scorer: report.scorer,
        adapter_history,
        scorer_history: report.history,
    })
}

/// A video with its adapted frames and pooled sums, ready for any query.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub adapted: Embeddings,
    pub pooled: PrefixSums,
    pub fps: f64,
}

impl PreparedVideo {
    pub fn new(frames: &Embeddings, fps: f64, adapter: Option<&AdapterParams>) -> Result<Self> {
        let adapted = match adapter {
            Some(a) => a.adapt_all(frames)?,
            None => frames.clone(),
        };
        let pooled = PrefixSums::over(&adapted, 0..adapted.len());
        Ok(Self {
            adapted,
            pooled,
            fps,
        })
    }

    pub fn len(&self) -> usize {
        self.adapted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapted.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fps
    }
}

/// Prepares every video of a corpus, in parallel.
pub fn prepare_videos(
    corpus: &Corpus,
    adapter: Option<&AdapterParams>,
) -> Result<BTreeMap<String, PreparedVideo>> {
    let items: Vec<(&String, _)> = corpus.videos.iter().collect();
    items
        .into_par_iter()
        .map(|(id, v)| Ok((id.clone(), PreparedVideo::new(&v.features, v.fps, adapter)?)))
        .collect()
}

/// Where proposal scores come from.
#[derive(Debug, Clone, Copy)]
pub enum ScoreSource<'a> {
    Internal(&'a ScorerParams),
    /// Rows of an external base model, keyed by query id.
    External(&'a BTreeMap<String, Vec<ExternalScore>>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub slice_ns: u64,
    pub select_ns: u64,
    pub score_ns: u64,
    pub rank_ns: u64,
    pub nms_ns: u64,
}

impl StageTimings {
    pub fn total_ns(&self) -> u64 {
        self.slice_ns + self.select_ns + self.score_ns + self.rank_ns + self.nms_ns
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: String,
    pub rank: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

impl Prediction {
    pub fn span(&self) -> Span {
        Span {
            start: self.start_sec,
            end: self.end_sec,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Grounding {
    pub query_id: String,
    pub predictions: Vec<Prediction>,
    pub timings: StageTimings,
    pub n_windows: usize,
    pub windows_processed: usize,
    pub selected: Vec<usize>,
    /// Candidate count before NMS.
    pub n_candidates: usize,
}

fn elapsed(t: Instant) -> u64 {
    t.elapsed().as_nanos() as u64
}

/// Grounds one query against a prepared video.
pub fn ground(
    instance: &GroundingInstance,
    video: &PreparedVideo,
    source: ScoreSource<'_>,
    cfg: &PipelineConfig,
) -> Result<Grounding> {
    let q = instance.query.cls();
    if q.len() != video.adapted.dim() {
        return Err(Error::DimensionMismatch {
            expected: video.adapted.dim(),
            actual: q.len(),
        });
    }
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let ws = slice_windows(video.len(), cfg.window_length_for(video.fps), video.fps)?;
    timings.slice_ns = elapsed(t);

    let t = Instant::now();
    let frame: Vec<f64> = video.adapted.rows().map(|v| dot_unchecked(v, q)).collect();
    let k = cfg.top_k_windows.resolve(video.fps, ws.len());
    let selected = select_top_k(&window_scores(&ws, &frame), k);
    timings.select_ns = elapsed(t);

    let t = Instant::now();
    let mut candidates = Vec::new();
    match source {
        ScoreSource::Internal(p) => {
            for &wi in &selected {
                let w = &ws.windows[wi];
                let bounds = 0..video.len();
                let ranges = enumerate_proposals(w);
                for (input, s) in score_ranges(&video.pooled, &bounds, &ranges, q, p) {
                    let matching = dot_unchecked(&input.h, q);
                    candidates.push(Candidate {
                        proposal: Proposal {
                            window_index: wi,
                            span: Span::from_features(input.range.clone(), video.fps),
                            score: s,
                            feature_range: input.range,
                        },
                        matching,
                    });
                }
            }
        }
        ScoreSource::External(rows) => {
            let rows = rows.get(&instance.query_id).map_or(&[][..], Vec::as_slice);
            let keep: BTreeSet<usize> = selected.iter().copied().collect();
            for proposal in load_external_scores(rows, &ws, video.fps)? {
                if !keep.contains(&proposal.window_index) {
                    continue;
                }
                let matching = dot_unchecked(&video.pooled.mean(proposal.feature_range.clone()), q);
                candidates.push(Candidate { proposal, matching });
            }
        }
    }
    timings.score_ns = elapsed(t);

    let n_candidates = candidates.len();
    if candidates.is_empty() {
        return Ok(Grounding {
            query_id: instance.query_id.clone(),
            predictions: Vec::new(),
            timings,
            n_windows: ws.len(),
            windows_processed: selected.len(),
            selected,
            n_candidates,
        });
    }

    let t = Instant::now();
    let ranked = fuse_and_rank(candidates, cfg.normalization_pool, cfg.fusion)?;
    timings.rank_ns = elapsed(t);

    let t = Instant::now();
    let kept = nms_limit(&ranked, cfg.nms_iou_threshold, cfg.prediction_count);
    timings.nms_ns = elapsed(t);

    let predictions = kept
        .proposals
        .iter()
        .zip(&kept.r)
        .enumerate()
        .map(|(i, (p, &r))| Prediction {
            query_id: instance.query_id.clone(),
            rank: i + 1,
            start_sec: p.span.start,
            end_sec: p.span.end,
            score: r,
        })
        .collect();
    Ok(Grounding {
        query_id: instance.query_id.clone(),
        predictions,
        timings,
        n_windows: ws.len(),
        windows_processed: selected.len(),
        selected,
        n_candidates,
    })
}

/// Grounds every instance of a corpus in parallel; output keeps corpus order.
pub fn ground_corpus(
    corpus: &Corpus,
    videos: &BTreeMap<String, PreparedVideo>,
    source: ScoreSource<'_>,
    cfg: &PipelineConfig,
) -> Result<Vec<Grounding>> {
    cfg.validate()?;
    corpus
        .instances
        .par_iter()
        .map(|inst| {
            let video = videos
                .get(&inst.video_id)
                .ok_or_else(|| Error::UnknownVideo(inst.video_id.clone()))?;
            ground(inst, video, source, cfg)
        })
        .collect()
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let file = fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

/// Groups predictions by query id, each list sorted by rank.
pub fn predictions_by_query(preds: &[Prediction]) -> BTreeMap<String, Vec<Prediction>> {
    let mut map: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        map.entry(p.query_id.clone()).or_default().push(p.clone());
    }
    for v in map.values_mut() {
        v.sort_by_key(|p| p.rank);
    }
    map
}
