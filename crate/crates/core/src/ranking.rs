//! Fine-grained proposal ranking: matching scores, min-max fusion and 1-D NMS.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scorer::Proposal;
use crate::span::iou;
use crate::vector::{dot_unchecked, min_max_normalize, Embeddings};

/// `m = mean(adapted[range]) . q_cls`.
pub fn matching_score(
    range: Range<usize>,
    video_adapted: &Embeddings,
    q_cls: &[f64],
) -> Result<f64> {
    if q_cls.len() != video_adapted.dim() {
        return Err(Error::DimensionMismatch {
            expected: video_adapted.dim(),
            actual: q_cls.len(),
        });
    }
    let h = video_adapted.mean_pool(range)?;
    Ok(dot_unchecked(&h, q_cls))
}

/// Set of candidates over which min-max normalization is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizationPool {
    /// All candidates of one query, across every selected window.
    #[default]
    Global,
    PerWindow,
}

impl FromStr for NormalizationPool {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "global" => Ok(Self::Global),
            "per-window" | "per_window" => Ok(Self::PerWindow),
            other => Err(format!(
                "unknown normalization pool `{other}` (global|per-window)"
            )),
        }
    }
}

impl std::fmt::Display for NormalizationPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Global => "global",
            Self::PerWindow => "per-window",
        })
    }
}

/// How the final rank score is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    /// `r = s~ + m~`.
    #[default]
    Sum,
    /// `r = s~`; `m~` is reported as zero.
    ProposalOnly,
}

impl FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Self::Sum),
            "proposal-only" | "proposal_only" => Ok(Self::ProposalOnly),
            other => Err(format!("unknown fusion `{other}` (sum|proposal-only)")),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::ProposalOnly => "proposal-only",
        })
    }
}

/// A proposal with its matching score, before fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub proposal: Proposal,
    pub matching: f64,
}

/// Proposals in rank order with their aligned scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedResult {
    pub proposals: Vec<Proposal>,
    pub matching: Vec<f64>,
    pub s_norm: Vec<f64>,
    pub m_norm: Vec<f64>,
    pub r: Vec<f64>,
    /// Candidate count before NMS.
    pub n_p: usize,
}

impl RankedResult {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    fn keep(&self, idx: &[usize]) -> Self {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect();
        Self {
            proposals: idx.iter().map(|&i| self.proposals[i].clone()).collect(),
            matching: pick(&self.matching),
            s_norm: pick(&self.s_norm),
            m_norm: pick(&self.m_norm),
            r: pick(&self.r),
            n_p: self.n_p,
        }
    }
}

/// Rank order: `r` descending, then start second, window index and end second ascending.
pub fn rank_order(r_a: f64, a: &Proposal, r_b: f64, b: &Proposal) -> Ordering {
    r_b.total_cmp(&r_a)
        .then_with(|| a.span.start.total_cmp(&b.span.start))
        .then_with(|| a.window_index.cmp(&b.window_index))
        .then_with(|| a.span.end.total_cmp(&b.span.end))
}

fn normalize_groups(values: &[f64], groups: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; values.len()];
    for g in groups {
        let part: Vec<f64> = g.iter().map(|&i| values[i]).collect();
        for (&i, v) in g.iter().zip(min_max_normalize(&part)?) {
            out[i] = v;
        }
    }
    Ok(out)
}

/// Min-max normalizes `s` and `m` over the chosen pool, sums them and sorts.
pub fn fuse_and_rank(
    candidates: Vec<Candidate>,
    pool: NormalizationPool,
    fusion: Fusion,
) -> Result<RankedResult> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = candidates.len();
    let groups: Vec<Vec<usize>> = match pool {
        NormalizationPool::Global => vec![(0..n).collect()],
        NormalizationPool::PerWindow => {
            let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, c) in candidates.iter().enumerate() {
                by.entry(c.proposal.window_index).or_default().push(i);
            }
            by.into_values().collect()
        }
    };
    let s: Vec<f64> = candidates.iter().map(|c| c.proposal.score).collect();
    let m: Vec<f64> = candidates.iter().map(|c| c.matching).collect();
    let s_norm = normalize_groups(&s, &groups)?;
    let m_norm = match fusion {
        Fusion::Sum => normalize_groups(&m, &groups)?,
        Fusion::ProposalOnly => vec![0.0; n],
    };
    let r: Vec<f64> = s_norm.iter().zip(&m_norm).map(|(a, b)| a + b).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order
        .sort_by(|&a, &b| rank_order(r[a], &candidates[a].proposal, r[b], &candidates[b].proposal));
    let unsorted = RankedResult {
        proposals: candidates.into_iter().map(|c| c.proposal).collect(),
        matching: m,
        s_norm,
        m_norm,
        r,
        n_p: n,
    };
    Ok(unsorted.keep(&order))
}

/// Greedy 1-D NMS: keeps the best remaining proposal and drops any later one
/// whose IoU with a kept proposal exceeds `threshold`.
pub fn nms(ranked: &RankedResult, threshold: f64) -> RankedResult {
    nms_limit(ranked, threshold, usize::MAX)
}

/// NMS that stops once `limit` proposals survive.
pub fn nms_limit(ranked: &RankedResult, threshold: f64, limit: usize) -> RankedResult {
    let mut kept: Vec<usize> = Vec::new();
    for (i, p) in ranked.proposals.iter().enumerate() {
        if kept.len() >= limit {
            break;
        }
        if kept
            .iter()
            .all(|&k| iou(&ranked.proposals[k].span, &p.span) <= threshold)
        {
            kept.push(i);
        }
    }
    ranked.keep(&kept)
}
