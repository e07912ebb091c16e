//! Query-guided coarse window selection.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::adapter::AdapterParams;
use crate::error::{Error, Result};
use crate::vector::{dot_unchecked, Embeddings};
use crate::windowing::WindowSet;

#[derive(Debug, Clone, PartialEq)]
pub struct WindowScoreTable {
    pub frame_scores: Vec<f64>,
    pub window_scores: Vec<f64>,
    pub selected: Vec<usize>,
}

fn check_dim(features: &Embeddings, q: &[f64]) -> Result<()> {
    if features.dim() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: features.dim(),
            actual: q.len(),
        });
    }
    Ok(())
}

/// Per-frame matching scores `v_j . q`, scoring `adapt(v_j)` when an adapter is given.
pub fn frame_scores(
    video: &Embeddings,
    q_cls: &[f64],
    adapter: Option<&AdapterParams>,
) -> Result<Vec<f64>> {
    check_dim(video, q_cls)?;
    match adapter {
        None => Ok(video.rows().map(|v| dot_unchecked(v, q_cls)).collect()),
        Some(p) => video
            .rows()
            .map(|v| Ok(dot_unchecked(&p.adapt(v)?, q_cls)))
            .collect(),
    }
}

/// Window score: the maximum frame score inside each window.
pub fn window_scores(ws: &WindowSet, frame_scores: &[f64]) -> Vec<f64> {
    ws.windows
        .iter()
        .map(|w| {
            frame_scores[w.range()]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Ranked {
    score: f64,
    index: usize,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    // greater = better: higher score, then lower index
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Indices of the `k` highest scores, descending, ties to the smaller index.
/// Keeps a capacity-`k` min-heap instead of sorting all scores.
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
    for (index, &score) in scores.iter().enumerate() {
        let item = Ranked { score, index };
        if heap.len() < k {
            heap.push(Reverse(item));
        } else if let Some(Reverse(worst)) = heap.peek() {
            if item > *worst {
                heap.pop();
                heap.push(Reverse(item));
            }
        }
    }
    let mut out: Vec<Ranked> = heap.into_iter().map(|Reverse(r)| r).collect();
    out.sort_by(|a, b| b.cmp(a));
    out.into_iter().map(|r| r.index).collect()
}

/// Scores every frame, pools per window and keeps the top `k` windows.
pub fn select_windows(
    ws: &WindowSet,
    features: &Embeddings,
    q_cls: &[f64],
    k: usize,
) -> Result<WindowScoreTable> {
    let frame_scores = frame_scores(features, q_cls, None)?;
    let window_scores = window_scores(ws, &frame_scores);
    let selected = select_top_k(&window_scores, k);
    Ok(WindowScoreTable {
        frame_scores,
        window_scores,
        selected,
    })
}
