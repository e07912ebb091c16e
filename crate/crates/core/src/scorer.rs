//! Proposal generation and scoring inside windows, plus window-proposal joint
//! contrastive training.
//!
//! The scoring head is a logistic model over
//! `x = [h, q, h ⊙ q, (h − c) ⊙ q]`, where `h` is the mean adapted feature of
//! the proposal and `c` the mean adapted feature of its flanking frames.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{nce_loss_and_grad, read_f32s, split_indices, AdapterParams};
use crate::datastore::{feature_range, Corpus, FeatureSequence};
use crate::error::{Error, Result};
use crate::optim::{run_epochs, LoopConfig, OptimizerKind, TrainHistory};
use crate::span::{iou, Span};
use crate::vector::{dot_unchecked, Embeddings, PrefixSums};
use crate::windowing::{
    best_positive_window, label_window, sample_negative_window, slice_windows, Window, WindowLabel,
    WindowSet,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub window_index: usize,
    pub span: Span,
    /// Proposal score in `(0, 1)`.
    pub score: f64,
    pub feature_range: Range<usize>,
}

/// Multi-scale anchors inside a window: widths `ceil(L/8), ceil(L/4), ceil(L/2), L`,
/// each slid at stride `max(1, width / 2)` with a tail anchor flush to the window end.
/// Returned as absolute feature ranges, sorted by (width, start), without duplicates.
pub fn enumerate_proposals(w: &Window) -> Vec<Range<usize>> {
    let len = w.length;
    let mut widths: Vec<usize> = [len.div_ceil(8), len.div_ceil(4), len.div_ceil(2), len]
        .into_iter()
        .filter(|&x| x >= 1)
        .collect();
    widths.dedup();
    let mut out = Vec::new();
    for width in widths {
        let stride = (width / 2).max(1);
        let mut start = 0;
        let mut last = None;
        while start + width <= len {
            out.push(start..start + width);
            last = Some(start);
            start += stride;
        }
        if last.is_some_and(|s| s + width < len) {
            out.push(len - width..len);
        }
    }
    out.sort_by_key(|r| (r.len(), r.start));
    out.dedup();
    out.into_iter()
        .map(|r| w.start_feature + r.start..w.start_feature + r.end)
        .collect()
}

/// Frames on either side of `range` (its own width each, at least one),
/// clipped to `bounds`, normally the whole video.
pub fn flank_ranges(range: &Range<usize>, bounds: &Range<usize>) -> (Range<usize>, Range<usize>) {
    let f = range.len().max(1);
    let left = range.start.saturating_sub(f).max(bounds.start)..range.start;
    let right = range.end..(range.end + f).min(bounds.end);
    (left, right.start.min(right.end)..right.end)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    dim: usize,
    values: Vec<f64>,
}

pub const SCORER_MAGIC: &[u8; 4] = b"CFS1";

impl ScorerParams {
    pub fn param_count(dim: usize) -> usize {
        4 * dim + 1
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; Self::param_count(dim)],
        }
    }

    pub fn from_values(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != Self::param_count(dim) {
            return Err(Error::DimensionMismatch {
                expected: Self::param_count(dim),
                actual: values.len(),
            });
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn theta(&self) -> &[f64] {
        &self.values[..4 * self.dim]
    }

    pub fn bias(&self) -> f64 {
        self.values[4 * self.dim]
    }

    pub fn set_bias(&mut self, b: f64) {
        let i = 4 * self.dim;
        self.values[i] = b;
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        let d = self.dim;
        &mut self.values[..4 * d]
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        dot_unchecked(self.theta(), x) + self.bias()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.values.len());
        out.extend_from_slice(SCORER_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.values {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedFile {
                path: path.into(),
                expected: 8,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[..4] != SCORER_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "CFS1",
            });
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(Error::ZeroDim { path: path.into() });
        }
        let values = read_f32s(&bytes[8..], Self::param_count(dim), path)?;
        Self::from_values(dim, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Pooled features of one proposal and the head input built from them.
#[derive(Debug, Clone)]
pub struct ProposalInput {
    pub range: Range<usize>,
    pub h: Vec<f64>,
    pub flanks: (Range<usize>, Range<usize>),
    pub x: Vec<f64>,
}

impl ProposalInput {
    pub fn build(
        pooled: &PrefixSums,
        range: Range<usize>,
        bounds: &Range<usize>,
        q: &[f64],
    ) -> Self {
        let d = q.len();
        let h = pooled.mean(range.clone());
        let flanks = flank_ranges(&range, bounds);
        let n_ctx = flanks.0.len() + flanks.1.len();
        let mut x = vec![0.0; 4 * d];
        x[..d].copy_from_slice(&h);
        x[d..2 * d].copy_from_slice(q);
        for k in 0..d {
            x[2 * d + k] = h[k] * q[k];
        }
        if n_ctx > 0 {
            let mut c = vec![0.0; d];
            let w = 1.0 / n_ctx as f64;
            pooled.add_sum(flanks.0.clone(), w, &mut c);
            pooled.add_sum(flanks.1.clone(), w, &mut c);
            for k in 0..d {
                x[3 * d + k] = (h[k] - c[k]) * q[k];
            }
        }
        Self {
            range,
            h,
            flanks,
            x,
        }
    }

    fn n_ctx(&self) -> usize {
        self.flanks.0.len() + self.flanks.1.len()
    }
}

/// Scores every range in `ranges`, given pooled adapted features covering
/// `bounds` (the frames flanks may reach).
pub fn score_ranges(
    pooled: &PrefixSums,
    bounds: &Range<usize>,
    ranges: &[Range<usize>],
    q: &[f64],
    p: &ScorerParams,
) -> Vec<(ProposalInput, f64)> {
    ranges
        .iter()
        .map(|r| {
            let input = ProposalInput::build(pooled, r.clone(), bounds, q);
            let s = sigmoid(p.logit(&input.x));
            (input, s)
        })
        .collect()
}

/// Score of one proposal `range` inside `window`.
pub fn score_proposal(
    range: Range<usize>,
    window: &Window,
    video_adapted: &Embeddings,
    q_cls: &[f64],
    p: &ScorerParams,
) -> Result<f64> {
    if q_cls.len() != p.dim || video_adapted.dim() != p.dim {
        return Err(Error::DimensionMismatch {
            expected: p.dim,
            actual: if q_cls.len() != p.dim {
                q_cls.len()
            } else {
                video_adapted.dim()
            },
        });
    }
    let wr = window.range();
    if range.is_empty() || range.start < wr.start || range.end > wr.end {
        return Err(Error::EmptyRange {
            start: range.start,
            end: range.end,
        });
    }
    let pooled = PrefixSums::over(video_adapted, context_range(window, video_adapted.len()));
    let input = ProposalInput::build(&pooled, range, &(0..video_adapted.len()), q_cls);
    Ok(sigmoid(p.logit(&input.x)))
}

/// Scaled-IoU training targets: `clamp((iou − t_min) / (t_max − t_min), 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouScale {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for IouScale {
    fn default() -> Self {
        Self {
            t_min: 0.3,
            t_max: 0.7,
        }
    }
}

impl IouScale {
    pub fn target(&self, iou: f64) -> f64 {
        ((iou - self.t_min) / (self.t_max - self.t_min)).clamp(0.0, 1.0)
    }
}

fn bce(s: f64, y: f64) -> f64 {
    let mut l = 0.0;
    if y > 0.0 {
        l -= y * s.ln();
    }
    if y < 1.0 {
        l -= (1.0 - y) * (1.0 - s).ln();
    }
    l
}

/// Mean binary cross-entropy between each score and its scaled-IoU target.
pub fn intra_window_loss(proposals: &[Proposal], gt: &Span, scale: IouScale) -> f64 {
    if proposals.is_empty() {
        return 0.0;
    }
    proposals
        .iter()
        .map(|p| bce(p.score, scale.target(iou(&p.span, gt))))
        .sum::<f64>()
        / proposals.len() as f64
}

/// Indices of positive proposals: IoU above `threshold`, or the single
/// highest-IoU proposal when none clears it.
pub fn contrastive_positives(ious: &[f64], threshold: f64) -> Vec<usize> {
    let above: Vec<usize> = (0..ious.len()).filter(|&i| ious[i] > threshold).collect();
    if !above.is_empty() || ious.is_empty() {
        return above;
    }
    let best = (0..ious.len()).fold(0, |b, i| if ious[i] > ious[b] { i } else { b });
    vec![best]
}

/// `−Σ_{pos} ln s − Σ_{neg} ln(1 − s)`.
pub fn inter_window_contrastive_loss(
    positive_window: &[Proposal],
    negative_window: &[Proposal],
    gt: &Span,
    threshold: f64,
) -> f64 {
    let ious: Vec<f64> = positive_window.iter().map(|p| iou(&p.span, gt)).collect();
    let pos: f64 = contrastive_positives(&ious, threshold)
        .into_iter()
        .map(|i| -positive_window[i].score.ln())
        .sum();
    let neg: f64 = negative_window.iter().map(|p| -(1.0 - p.score).ln()).sum();
    pos + neg
}

#[derive(Debug, Clone)]
pub struct JointTrainConfig {
    pub learning_rate: f64,
    pub adapter_learning_rate: f64,
    pub lambda_con: f64,
    pub lambda_adapt: f64,
    pub positive_iou_threshold: f64,
    pub iou_scale: IouScale,
    pub batch_size: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub window_length: usize,
    pub optimizer: OptimizerKind,
    /// Also update the adapter through the scorer losses plus `lambda_adapt · L_adapt`.
    pub joint: bool,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adapter_learning_rate: 1e-5,
            lambda_con: 1.0,
            lambda_adapt: 0.2,
            positive_iou_threshold: 0.7,
            iou_scale: IouScale::default(),
            batch_size: 32,
            seed: 0,
            max_epochs: 200,
            early_stop_patience: 10,
            window_length: 90,
            optimizer: OptimizerKind::Sgd,
            joint: false,
        }
    }
}

impl JointTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.iou_scale;
        if !(0.0 < s.t_min && s.t_min < s.t_max && s.t_max <= 1.0) {
            return Err(Error::Config("need 0 < t_min < t_max <= 1".into()));
        }
        if self.lambda_con < 0.0 || self.lambda_adapt < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.learning_rate <= 0.0 || self.adapter_learning_rate <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One training instance: a query, its positive window and precomputed targets.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub video_id: &'a str,
    pub video: &'a FeatureSequence,
    pub windows: &'a WindowSet,
    pub q: &'a [f64],
    pub gt: Span,
    pub gt_range: Range<usize>,
    pub positive: usize,
    pub pos_ranges: Vec<Range<usize>>,
    pub targets: Vec<f64>,
    pub con_positives: Vec<usize>,
    /// Fixed negative used for loss monitoring; training resamples each step.
    pub monitor_negative: Option<usize>,
}

/// Window sets per video for a given window length.
pub fn window_sets(corpus: &Corpus, window_length: usize) -> Result<BTreeMap<String, WindowSet>> {
    corpus
        .videos
        .iter()
        .map(|(id, v)| Ok((id.clone(), slice_windows(v.len(), window_length, v.fps)?)))
        .collect()
}

pub fn build_train_items<'a>(
    corpus: &'a Corpus,
    windows: &'a BTreeMap<String, WindowSet>,
    cfg: &JointTrainConfig,
) -> Result<Vec<TrainItem<'a>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f_6e69);
    let mut items = Vec::with_capacity(corpus.instances.len());
    for inst in &corpus.instances {
        let video = corpus.video(&inst.video_id)?;
        let ws = &windows[&inst.video_id];
        let Some(pos) = best_positive_window(ws, &inst.gt) else {
            continue;
        };
        let pos_ranges = enumerate_proposals(pos);
        let ious: Vec<f64> = pos_ranges
            .iter()
            .map(|r| iou(&Span::from_features(r.clone(), video.fps), &inst.gt))
            .collect();
        let targets = ious.iter().map(|&u| cfg.iou_scale.target(u)).collect();
        let con_positives = contrastive_positives(&ious, cfg.positive_iou_threshold);
        let monitor_negative = sample_negative_window(ws, &inst.gt, &mut rng)
            .ok()
            .map(|w| w.index);
        items.push(TrainItem {
            video_id: &inst.video_id,
            video,
            windows: ws,
            q: inst.query.cls(),
            gt: inst.gt,
            gt_range: feature_range(&inst.gt, video.fps, video.len()),
            positive: pos.index,
            pos_ranges,
            targets,
            con_positives,
            monitor_negative,
        });
    }
    Ok(items)
}

/// Pooled adapted features for one window, either from a frozen per-video
/// cache or recomputed with the current adapter.
enum Pooling<'a> {
    Frozen(&'a PrefixSums),
    Live(PrefixSums),
}

impl Pooling<'_> {
    fn get(&self) -> &PrefixSums {
        match self {
            Pooling::Frozen(p) => p,
            Pooling::Live(p) => p,
        }
    }
}

/// Frames a proposal of `w` can touch, flanks included.
pub fn context_range(w: &Window, n_frames: usize) -> Range<usize> {
    let r = w.range();
    r.start.saturating_sub(r.len())..(r.end + r.len()).min(n_frames)
}

fn live_pooling(adapter: &AdapterParams, frames: &Embeddings, range: Range<usize>) -> PrefixSums {
    PrefixSums::from_fn(frames.dim(), range, |i, out| {
        out.copy_from_slice(&adapter.adapt_unchecked(frames.row(i)))
    })
}

/// Loss and gradient accumulators for one batch.
struct Accum {
    loss: f64,
    scorer: Vec<f64>,
    adapter: Option<Vec<f64>>,
}

/// Backpropagates `dz` (gradient on the logit) through one proposal.
fn backward_proposal(
    p: &ScorerParams,
    input: &ProposalInput,
    q: &[f64],
    dz: f64,
    frames: &Embeddings,
    adapter: Option<&AdapterParams>,
    acc: &mut Accum,
) {
    let d = p.dim;
    for (g, x) in acc.scorer.iter_mut().zip(&input.x) {
        *g += dz * x;
    }
    acc.scorer[4 * d] += dz;
    let (Some(adapter), Some(ga)) = (adapter, acc.adapter.as_mut()) else {
        return;
    };
    let theta = p.theta();
    let has_ctx = input.n_ctx() > 0;
    let mut dh = vec![0.0; d];
    let mut dc = vec![0.0; d];
    for k in 0..d {
        let contrast = if has_ctx {
            theta[3 * d + k] * q[k]
        } else {
            0.0
        };
        dh[k] = dz * (theta[k] + theta[2 * d + k] * q[k] + contrast);
        dc[k] = -dz * contrast;
    }
    adapter.backward_pooled(frames, input.range.clone(), &dh, ga);
    if has_ctx {
        let n = input.n_ctx() as f64;
        for flank in [&input.flanks.0, &input.flanks.1] {
            if flank.is_empty() {
                continue;
            }
            let share = flank.len() as f64 / n;
            let g: Vec<f64> = dc.iter().map(|x| x * share).collect();
            adapter.backward_pooled(frames, flank.clone(), &g, ga);
        }
    }
}

/// Trainer state shared by the loss and gradient passes.
struct JointProblem<'a> {
    items: &'a [TrainItem<'a>],
    cfg: &'a JointTrainConfig,
    dim: usize,
    /// Frozen adapter features per video (non-joint mode).
    frozen: BTreeMap<String, PrefixSums>,
    frozen_adapter: AdapterParams,
}

impl<'a> JointProblem<'a> {
    fn new(items: &'a [TrainItem<'a>], cfg: &'a JointTrainConfig, adapter: &AdapterParams) -> Self {
        let mut frozen = BTreeMap::new();
        if !cfg.joint {
            for item in items {
                if frozen.contains_key(item.video_id) {
                    continue;
                }
                let f = &item.video.features;
                let sums = live_pooling(adapter, f, 0..f.len());
                frozen.insert(item.video_id.to_string(), sums);
            }
        }
        Self {
            items,
            cfg,
            dim: adapter.dim(),
            frozen,
            frozen_adapter: adapter.clone(),
        }
    }

    fn split(&self, values: &[f64]) -> (ScorerParams, Option<AdapterParams>) {
        let n = ScorerParams::param_count(self.dim);
        let scorer = ScorerParams::from_values(self.dim, values[..n].to_vec()).expect("sized");
        let adapter = self.cfg.joint.then(|| {
            AdapterParams::from_values(self.dim, self.frozen_adapter.hidden(), values[n..].to_vec())
                .expect("sized")
        });
        (scorer, adapter)
    }

    fn pooling(
        &self,
        item: &TrainItem,
        adapter: Option<&AdapterParams>,
        w: &Window,
    ) -> Pooling<'_> {
        match adapter {
            Some(a) => Pooling::Live(live_pooling(
                a,
                &item.video.features,
                context_range(w, item.video.features.len()),
            )),
            None => Pooling::Frozen(&self.frozen[item.video_id]),
        }
    }

    /// Adds one instance's `L_ori + λ_con · L_con` (and gradients when asked).
    fn instance(
        &self,
        item: &TrainItem,
        negative: Option<usize>,
        scorer: &ScorerParams,
        adapter: Option<&AdapterParams>,
        acc: &mut Accum,
        with_grad: bool,
    ) {
        let frames = &item.video.features;
        let pos_w = &item.windows.windows[item.positive];
        let pooled = self.pooling(item, adapter, pos_w);
        let bounds = 0..frames.len();
        let n = item.pos_ranges.len() as f64;
        let use_con = self.cfg.lambda_con > 0.0 && negative.is_some();
        let lc = self.cfg.lambda_con;
        for (i, r) in item.pos_ranges.iter().enumerate() {
            let input = ProposalInput::build(pooled.get(), r.clone(), &bounds, item.q);
            let z = scorer.logit(&input.x);
            let y = item.targets[i];
            // BCE with logits: y·softplus(−z) + (1−y)·softplus(z)
            acc.loss += (y * softplus(-z) + (1.0 - y) * softplus(z)) / n;
            let mut dz = (sigmoid(z) - y) / n;
            if use_con && item.con_positives.contains(&i) {
                acc.loss += lc * softplus(-z);
                dz += lc * (sigmoid(z) - 1.0);
            }
            if with_grad {
                backward_proposal(scorer, &input, item.q, dz, frames, adapter, acc);
            }
        }
        if !use_con {
            return;
        }
        let neg_w = &item.windows.windows[negative.expect("checked")];
        let pooled = self.pooling(item, adapter, neg_w);
        let bounds = 0..frames.len();
        for r in enumerate_proposals(neg_w) {
            let input = ProposalInput::build(pooled.get(), r, &bounds, item.q);
            let z = scorer.logit(&input.x);
            acc.loss += lc * softplus(z);
            if with_grad {
                let dz = lc * sigmoid(z);
                backward_proposal(scorer, &input, item.q, dz, frames, adapter, acc);
            }
        }
    }

    /// Adds `λ_adapt · L_adapt` over the batch's ground-truth proposals.
    fn nce_term(
        &self,
        batch: &[&TrainItem],
        adapter: &AdapterParams,
        acc: &mut Accum,
        with_grad: bool,
    ) {
        if batch.len() < 2 || self.cfg.lambda_adapt == 0.0 {
            return;
        }
        let h: Vec<Vec<f64>> = batch
            .iter()
            .map(|it| {
                let pooled = live_pooling(adapter, &it.video.features, it.gt_range.clone());
                pooled.mean(it.gt_range.clone())
            })
            .collect();
        let q: Vec<Vec<f64>> = batch.iter().map(|it| it.q.to_vec()).collect();
        let (loss, dh) = nce_loss_and_grad(&h, &q);
        acc.loss += self.cfg.lambda_adapt * loss;
        if with_grad {
            let ga = acc.adapter.as_mut().expect("joint mode");
            for (it, g) in batch.iter().zip(&dh) {
                let g: Vec<f64> = g.iter().map(|x| x * self.cfg.lambda_adapt).collect();
                adapter.backward_pooled(&it.video.features, it.gt_range.clone(), &g, ga);
            }
        }
    }

    fn batch(
        &self,
        values: &[f64],
        batch: &[&TrainItem],
        negatives: &[Option<usize>],
        with_grad: bool,
    ) -> (f64, Vec<f64>) {
        let (scorer, adapter) = self.split(values);
        let mut acc = Accum {
            loss: 0.0,
            scorer: vec![0.0; ScorerParams::param_count(self.dim)],
            adapter: adapter.as_ref().map(|a| vec![0.0; a.values().len()]),
        };
        for (item, neg) in batch.iter().zip(negatives) {
            self.instance(item, *neg, &scorer, adapter.as_ref(), &mut acc, with_grad);
        }
        if let Some(a) = adapter.as_ref() {
            self.nce_term(batch, a, &mut acc, with_grad);
        }
        let mut grad = acc.scorer;
        if let Some(ga) = acc.adapter {
            grad.extend(ga);
        }
        (acc.loss, grad)
    }

    fn monitor_loss(&self, values: &[f64], idx: &[usize]) -> f64 {
        idx.chunks(self.cfg.batch_size.max(1))
            .map(|c| {
                let b: Vec<&TrainItem> = c.iter().map(|&i| &self.items[i]).collect();
                let negs: Vec<Option<usize>> = b.iter().map(|it| it.monitor_negative).collect();
                self.batch(values, &b, &negs, false).0
            })
            .sum()
    }
}

/// Loss and analytic gradient of one batch, for gradient checking.
///
/// `values` is the scorer parameter vector, followed by the adapter parameters
/// in joint mode.
pub fn joint_batch_loss_and_grad(
    items: &[TrainItem],
    negatives: &[Option<usize>],
    values: &[f64],
    adapter: &AdapterParams,
    cfg: &JointTrainConfig,
) -> (f64, Vec<f64>) {
    let problem = JointProblem::new(items, cfg, adapter);
    let b: Vec<&TrainItem> = items.iter().collect();
    problem.batch(values, &b, negatives, true)
}

#[derive(Debug, Clone)]
pub struct ScorerTrainReport {
    pub scorer: ScorerParams,
    /// The adapter after training; unchanged unless `cfg.joint`.
    pub adapter: AdapterParams,
    pub history: TrainHistory,
}

pub fn train_scorer(
    corpus: &Corpus,
    adapter: &AdapterParams,
    cfg: &JointTrainConfig,
) -> Result<ScorerTrainReport> {
    cfg.validate()?;
    let windows = window_sets(corpus, cfg.window_length)?;
    let items = build_train_items(corpus, &windows, cfg)?;
    if items.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "scorer training needs at least 2 instances, got {}",
            items.len()
        )));
    }
    let dim = adapter.dim();
    let problem = JointProblem::new(&items, cfg, adapter);
    let (train, heldout) = split_indices(items.len(), cfg.seed);
    let mut init = ScorerParams::zeros(dim).values;
    let mut scale = vec![1.0; init.len()];
    if cfg.joint {
        init.extend_from_slice(adapter.values());
        scale.resize(init.len(), cfg.adapter_learning_rate / cfg.learning_rate);
    }
    let loop_cfg = LoopConfig {
        optimizer: cfg.optimizer,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        max_epochs: cfg.max_epochs,
        patience: cfg.early_stop_patience,
        seed: cfg.seed,
        param_scale: scale,
    };
    let (best, history) = run_epochs(
        init,
        train.len(),
        &loop_cfg,
        |values, chunk, rng| {
            let b: Vec<&TrainItem> = chunk.iter().map(|&i| &items[train[i]]).collect();
            let negs: Vec<Option<usize>> = b
                .iter()
                .map(|it| {
                    sample_negative_window(it.windows, &it.gt, rng)
                        .ok()
                        .map(|w| w.index)
                })
                .collect();
            problem.batch(values, &b, &negs, true).1
        },
        |values| problem.monitor_loss(values, &train),
        |values| problem.monitor_loss(values, &heldout),
    );
    let (scorer, tuned) = problem.split(&best);
    Ok(ScorerTrainReport {
        scorer,
        adapter: tuned.unwrap_or_else(|| adapter.clone()),
        history,
    })
}

/// One line of an external proposal-score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalScore {
    pub query_id: String,
    pub window_index: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

/// Reads external proposal scores grouped by query id, in file order.
pub fn read_external_scores(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<String, Vec<ExternalScore>>> {
    let file = fs::File::open(path.as_ref())?;
    let mut out: BTreeMap<String, Vec<ExternalScore>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ExternalScore = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !(row.start_sec.is_finite() && row.end_sec.is_finite() && row.score.is_finite()) {
            return Err(Error::MalformedLine {
                line: i + 1,
                message: "non-finite value".into(),
            });
        }
        out.entry(row.query_id.clone()).or_default().push(row);
    }
    Ok(out)
}

const SCORE_CLAMP: f64 = 1e-6;

/// Validates external rows against a window set: spans are clipped to their
/// window and scores clamped into `[1e-6, 1 − 1e-6]`.
pub fn load_external_scores(
    rows: &[ExternalScore],
    ws: &WindowSet,
    fps: f64,
) -> Result<Vec<Proposal>> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let w = ws
                .windows
                .get(row.window_index)
                .ok_or(Error::UnknownWindowIndex {
                    index: row.window_index,
                    count: ws.len(),
                })?;
            let ws_span = w.span_seconds;
            let start = row.start_sec.max(ws_span.start);
            let end = row.end_sec.min(ws_span.end);
            if !(start < end) {
                return Err(Error::MalformedLine {
                    line: i + 1,
                    message: format!(
                        "span [{}, {}) does not overlap window {}",
                        row.start_sec, row.end_sec, row.window_index
                    ),
                });
            }
            let span = Span { start, end };
            let wr = w.range();
            let fr = feature_range(&span, fps, wr.end);
            let fr = fr.start.max(wr.start)..fr.end.max(fr.start.max(wr.start) + 1).min(wr.end);
            Ok(Proposal {
                window_index: w.index,
                span,
                score: row.score.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP),
                feature_range: fr,
            })
        })
        .collect()
}

/// Window label helper re-exported for callers that split proposals by window.
pub fn is_positive(w: &Window, gt: &Span) -> bool {
    label_window(w, gt) == WindowLabel::Positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{synthesize_corpus, SynthSpec};
    use crate::windowing::slice_windows;
    use proptest::prelude::*;
    use rand::Rng;

    fn window(start: usize, length: usize) -> Window {
        Window {
            index: 0,
            start_feature: start,
            length,
            span_seconds: Span::from_features(start..start + length, 1.0),
        }
    }

    fn prop(start: f64, end: f64, score: f64) -> Proposal {
        Proposal {
            window_index: 0,
            span: Span { start, end },
            score,
            feature_range: 0..1,
        }
    }

    #[test]
    fn enumerate_examples() {
        let a = enumerate_proposals(&window(0, 8));
        assert!(a.contains(&(0..8)) && a.contains(&(0..1)));
        let widths: std::collections::BTreeSet<usize> = a.iter().map(|r| r.len()).collect();
        assert_eq!(widths.into_iter().collect::<Vec<_>>(), vec![1, 2, 4, 8]);
        assert_eq!(enumerate_proposals(&window(0, 2)), vec![0..1, 1..2, 0..2]);
        let w = window(40, 90);
        for r in enumerate_proposals(&w) {
            assert!(r.start >= 40 && r.end <= 130 && !r.is_empty());
        }
    }

    #[test]
    fn flanks_clip_to_window() {
        assert_eq!(flank_ranges(&(4..8), &(0..10)), (0..4, 8..10));
        assert_eq!(flank_ranges(&(10..12), &(0..20)), (8..10, 12..14));
        assert_eq!(flank_ranges(&(0..10), &(0..10)), (0..0, 10..10));
        assert_eq!(flank_ranges(&(0..1), &(0..3)), (0..0, 1..2));
    }

    #[test]
    fn score_examples() {
        let v = Embeddings::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let w = window(0, 3);
        let mut p = ScorerParams::zeros(2);
        assert_eq!(score_proposal(0..2, &w, &v, &[0.3, 0.7], &p).unwrap(), 0.5);
        p.set_bias(10.0);
        assert!(score_proposal(0..2, &w, &v, &[0.3, 0.7], &p).unwrap() > 0.9999);
        p.set_bias(-10.0);
        assert!(score_proposal(0..2, &w, &v, &[0.3, 0.7], &p).unwrap() < 0.0001);
        p.theta_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = i as f64 * 0.1);
        let a = score_proposal(1..3, &w, &v, &[0.3, 0.7], &p).unwrap();
        assert_eq!(a, score_proposal(1..3, &w, &v, &[0.3, 0.7], &p).unwrap());
        assert!(matches!(
            score_proposal(0..2, &w, &v, &[0.3], &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ScorerParams::zeros(3);
        p.theta_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = i as f64 * 0.25 - 1.0);
        p.set_bias(0.5);
        let bytes = p.to_bytes();
        let q = ScorerParams::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(q, p);
        assert_eq!(q.to_bytes(), bytes);
        assert!(matches!(
            ScorerParams::from_bytes(b"CFA1\x03\0\0\0", Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            ScorerParams::from_bytes(&bytes[..20], Path::new("x")),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn intra_loss_examples() {
        let gt = Span {
            start: 0.0,
            end: 10.0,
        };
        let scale = IouScale::default();
        // iou 0.5 -> target 0.5; BCE(0.5, 0.5) = ln 2
        let l = intra_window_loss(&[prop(0.0, 5.0, 0.5)], &gt, scale);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = intra_window_loss(&[prop(0.0, 10.0, 1.0 - 1e-12)], &gt, scale);
        assert!(l < 1e-9);
        assert_eq!(scale.target(0.3), 0.0);
        assert_eq!(scale.target(0.1), 0.0);
        assert_eq!(scale.target(0.9), 1.0);
    }

    #[test]
    fn contrastive_examples() {
        let gt = Span {
            start: 0.0,
            end: 10.0,
        };
        let pos = [prop(0.0, 10.0, 1.0), prop(20.0, 30.0, 0.3)];
        let neg = [prop(40.0, 50.0, 0.0)];
        assert_eq!(inter_window_contrastive_loss(&pos, &neg, &gt, 0.7), 0.0);
        let l = inter_window_contrastive_loss(
            &[prop(0.0, 10.0, 0.5)],
            &[prop(40.0, 50.0, 0.5)],
            &gt,
            0.7,
        );
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
        let up = inter_window_contrastive_loss(
            &[prop(0.0, 10.0, 0.6)],
            &[prop(40.0, 50.0, 0.5)],
            &gt,
            0.7,
        );
        let down = inter_window_contrastive_loss(
            &[prop(0.0, 10.0, 0.5)],
            &[prop(40.0, 50.0, 0.4)],
            &gt,
            0.7,
        );
        assert!(up < l && down < l);
    }

    #[test]
    fn positives_fall_back_to_best() {
        assert_eq!(contrastive_positives(&[0.8, 0.2, 0.75], 0.7), vec![0, 2]);
        assert_eq!(contrastive_positives(&[0.1, 0.5, 0.5], 0.7), vec![1]);
        assert!(contrastive_positives(&[], 0.7).is_empty());
    }

    #[test]
    fn external_score_examples() {
        let ws = slice_windows(300, 90, 1.0).unwrap();
        let row = |i: usize, s: f64, e: f64, score: f64| ExternalScore {
            query_id: "q".into(),
            window_index: i,
            start_sec: s,
            end_sec: e,
            score,
        };
        let rows = [
            row(0, 10.0, 20.0, 0.3),
            row(1, 50.0, 60.0, 1.2),
            row(5, 200.0, 400.0, -1.0),
        ];
        let p = load_external_scores(&rows, &ws, 1.0).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[1].score, 1.0 - 1e-6);
        assert_eq!(p[2].score, 1e-6);
        assert_eq!(
            p[2].span,
            Span {
                start: 210.0,
                end: 300.0
            }
        );
        assert_eq!(p[0].feature_range, 10..20);
        assert!(matches!(
            load_external_scores(&[row(6, 0.0, 1.0, 0.5)], &ws, 1.0),
            Err(Error::UnknownWindowIndex { index: 6, count: 6 })
        ));
        assert!(matches!(
            load_external_scores(&[row(0, 100.0, 120.0, 0.5)], &ws, 1.0),
            Err(Error::MalformedLine { .. })
        ));
    }

    fn small_corpus(seed: u64) -> Corpus {
        let spec = SynthSpec {
            num_videos: 2,
            video_length_features: 48,
            dim: 8,
            queries_per_video: 2,
            moment_length_min: 4,
            moment_length_max: 10,
            signal_strength: 0.7,
            noise_seed: seed,
            ..SynthSpec::default()
        };
        synthesize_corpus(&spec).unwrap().to_corpus(true)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let corpus = small_corpus(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for joint in [false, true] {
            let cfg = JointTrainConfig {
                window_length: 16,
                joint,
                ..Default::default()
            };
            let ws = window_sets(&corpus, cfg.window_length).unwrap();
            let items = build_train_items(&corpus, &ws, &cfg).unwrap();
            let mut adapter = AdapterParams::init(8, 2, 5);
            adapter
                .values_mut()
                .iter_mut()
                .for_each(|x| *x += rng.random_range(-0.3..0.3));
            let mut values: Vec<f64> = (0..ScorerParams::param_count(8))
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            if joint {
                values.extend_from_slice(adapter.values());
            }
            let negs: Vec<Option<usize>> = items.iter().map(|it| it.monitor_negative).collect();
            let (_, g) = joint_batch_loss_and_grad(&items, &negs, &values, &adapter, &cfg);
            let h = 1e-3;
            for i in 0..values.len() {
                let mut v = values.clone();
                v[i] += h;
                let lp = joint_batch_loss_and_grad(&items, &negs, &v, &adapter, &cfg).0;
                v[i] -= 2.0 * h;
                let lm = joint_batch_loss_and_grad(&items, &negs, &v, &adapter, &cfg).0;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    rel_err(g[i], fd) <= 1e-4,
                    "joint={joint} i={i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn training_is_reproducible_and_separates() {
        let spec = SynthSpec {
            num_videos: 4,
            video_length_features: 120,
            dim: 16,
            queries_per_video: 2,
            moment_length_min: 8,
            moment_length_max: 16,
            signal_strength: 1.0,
            noise_seed: 9,
            ..SynthSpec::default()
        };
        let corpus = synthesize_corpus(&spec).unwrap().to_corpus(true);
        let adapter = AdapterParams::zeros(16, 4);
        let cfg = JointTrainConfig {
            window_length: 30,
            max_epochs: 30,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let a = train_scorer(&corpus, &adapter, &cfg).unwrap();
        let b = train_scorer(&corpus, &adapter, &cfg).unwrap();
        assert_eq!(a.scorer.to_bytes(), b.scorer.to_bytes());
        assert_eq!(a.history, b.history);

        let ws = window_sets(&corpus, 30).unwrap();
        let items = build_train_items(&corpus, &ws, &cfg).unwrap();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for it in &items {
            let f = &it.video.features;
            let sums = PrefixSums::over(f, 0..f.len());
            for w in &it.windows.windows {
                let bounds = 0..f.len();
                for (input, s) in
                    score_ranges(&sums, &bounds, &enumerate_proposals(w), it.q, &a.scorer)
                {
                    if input.range.start < it.gt_range.end && it.gt_range.start < input.range.end {
                        pos.push(s);
                    } else if !is_positive(w, &it.gt) {
                        neg.push(s);
                    }
                }
            }
        }
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean(&pos) > mean(&neg), "{} vs {}", mean(&pos), mean(&neg));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn contrastive_loss_non_negative(
            pos in prop::collection::vec(0.001..1.0f64, 1..6),
            neg in prop::collection::vec(0.0..0.999f64, 0..6),
        ) {
            let gt = Span { start: 0.0, end: 10.0 };
            let p: Vec<Proposal> = pos.iter().map(|&s| prop(0.0, 10.0, s)).collect();
            let n: Vec<Proposal> = neg.iter().map(|&s| prop(50.0, 60.0, s)).collect();
            let l = inter_window_contrastive_loss(&p, &n, &gt, 0.7);
            prop_assert!(l >= 0.0);
            let perfect = pos.iter().all(|&s| s == 1.0) && neg.iter().all(|&s| s == 0.0);
            prop_assert_eq!(l == 0.0, perfect);
        }

        #[test]
        fn target_monotone_in_iou(a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let s = IouScale::default();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.target(lo) <= s.target(hi));
        }

        #[test]
        fn proposals_inside_window(start in 0usize..50, len in 2usize..200) {
            let w = window(start, len);
            let ps = enumerate_proposals(&w);
            prop_assert!(ps.contains(&(start..start + len)));
            for r in &ps {
                prop_assert!(r.start >= start && r.end <= start + len && r.start < r.end);
            }
            let mut sorted = ps.clone();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), ps.len());
        }

        #[test]
        fn scores_in_unit_interval(
            theta in prop::collection::vec(-3.0..3.0f64, 9),
            h in prop::collection::vec(-1.0..1.0f64, 2),
        ) {
            let p = ScorerParams::from_values(2, theta).unwrap();
            let v = Embeddings::from_rows(&[h.clone(), h.clone(), h]).unwrap();
            let s = score_proposal(0..2, &window(0, 3), &v, &[0.6, 0.8], &p).unwrap();
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
