//! Fixed-length overlapping windows over a frame sequence.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::span::Span;

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub index: usize,
    pub start_feature: usize,
    pub length: usize,
    pub span_seconds: Span,
}

impl Window {
    pub fn range(&self) -> Range<usize> {
        self.start_feature..self.start_feature + self.length
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Window>,
    pub stride: usize,
    pub window_length: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Window start offsets: `0, s, 2s, ...` with `s = floor(L_w / 2)`, plus a
/// tail window anchored at `L_v - L_w` when the strided starts stop short.
pub fn window_starts(video_len: usize, window_len: usize) -> Result<Vec<usize>> {
    if window_len < 2 {
        return Err(Error::InvalidWindowLength(window_len));
    }
    if video_len <= window_len {
        return Ok(vec![0]);
    }
    let stride = window_len / 2;
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|s| s + window_len <= video_len)
        .collect();
    let last = *starts
        .last()
        .expect("video_len > window_len gives a start at 0");
    if last + window_len < video_len {
        let tail = video_len - window_len;
        if tail != last {
            starts.push(tail);
        }
    }
    Ok(starts)
}

pub fn slice_windows(video_len: usize, window_len: usize, fps: f64) -> Result<WindowSet> {
    if video_len == 0 {
        return Err(Error::EmptyInput);
    }
    let starts = window_starts(video_len, window_len)?;
    let length = window_len.min(video_len);
    let windows = starts
        .into_iter()
        .enumerate()
        .map(|(index, start)| Window {
            index,
            start_feature: start,
            length,
            span_seconds: Span::from_features(start..start + length, fps),
        })
        .collect();
    Ok(WindowSet {
        windows,
        stride: window_len / 2,
        window_length: window_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowLabel {
    Positive,
    Negative,
}

/// Positive iff the window's span in seconds intersects the ground truth.
pub fn label_window(w: &Window, gt: &Span) -> WindowLabel {
    if w.span_seconds.intersection(gt) > 0.0 {
        WindowLabel::Positive
    } else {
        WindowLabel::Negative
    }
}

/// Uniformly random negative window.
pub fn sample_negative_window<'a, R: Rng + ?Sized>(
    ws: &'a WindowSet,
    gt: &Span,
    rng: &mut R,
) -> Result<&'a Window> {
    let negatives: Vec<&Window> = ws
        .windows
        .iter()
        .filter(|w| label_window(w, gt) == WindowLabel::Negative)
        .collect();
    if negatives.is_empty() {
        return Err(Error::NoNegativeWindow);
    }
    Ok(negatives[rng.random_range(0..negatives.len())])
}

/// The positive window with the largest overlap with `gt`, earliest on ties.
pub fn best_positive_window<'a>(ws: &'a WindowSet, gt: &Span) -> Option<&'a Window> {
    ws.windows
        .iter()
        .filter(|w| label_window(w, gt) == WindowLabel::Positive)
        .fold(None, |best: Option<&Window>, w| match best {
            Some(b) if b.span_seconds.intersection(gt) >= w.span_seconds.intersection(gt) => {
                Some(b)
            }
            _ => Some(w),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn starts(lv: usize, lw: usize) -> Vec<usize> {
        slice_windows(lv, lw, 1.0)
            .unwrap()
            .windows
            .iter()
            .map(|w| w.start_feature)
            .collect()
    }

    #[test]
    fn slicing_examples() {
        assert_eq!(starts(90, 90), vec![0]);
        let ws = slice_windows(90, 90, 1.0).unwrap();
        assert_eq!(ws.windows[0].range(), 0..90);
        assert_eq!(starts(100, 90), vec![0, 10]);
        assert_eq!(starts(300, 90), vec![0, 45, 90, 135, 180, 210]);
        // short video: one window of the full length
        let ws = slice_windows(30, 90, 1.0).unwrap();
        assert_eq!(ws.windows[0].range(), 0..30);
        assert!(matches!(
            slice_windows(10, 1, 1.0),
            Err(Error::InvalidWindowLength(1))
        ));
    }

    #[test]
    fn odd_window_length_uses_floor_stride() {
        assert_eq!(starts(20, 5), vec![0, 2, 4, 6, 8, 10, 12, 14, 15]);
        assert_eq!(slice_windows(20, 5, 1.0).unwrap().stride, 2);
    }

    #[test]
    fn labeling_examples() {
        let w = |s: f64, e: f64| Window {
            index: 0,
            start_feature: 0,
            length: 1,
            span_seconds: Span::new(s, e).unwrap(),
        };
        let gt = |s, e| Span::new(s, e).unwrap();
        assert_eq!(
            label_window(&w(0.0, 48.0), &gt(40.0, 60.0)),
            WindowLabel::Positive
        );
        assert_eq!(
            label_window(&w(0.0, 48.0), &gt(48.0, 60.0)),
            WindowLabel::Negative
        );
        assert_eq!(
            label_window(&w(24.0, 72.0), &gt(71.9, 80.0)),
            WindowLabel::Positive
        );
    }

    #[test]
    fn negative_sampling() {
        let ws = slice_windows(300, 90, 1.0).unwrap();
        // gt [100, 130) touches windows starting at 45, 90
        let gt = Span::new(100.0, 130.0).unwrap();
        let positives: Vec<usize> = ws
            .windows
            .iter()
            .filter(|w| label_window(w, &gt) == WindowLabel::Positive)
            .map(|w| w.index)
            .collect();
        assert_eq!(positives, vec![1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let w = sample_negative_window(&ws, &gt, &mut rng).unwrap();
            assert!(!positives.contains(&w.index));
        }
        let pick = |seed| {
            sample_negative_window(&ws, &gt, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap()
                .index
        };
        assert_eq!(pick(11), pick(11));
        let whole = Span::new(0.0, 300.0).unwrap();
        assert!(matches!(
            sample_negative_window(&ws, &whole, &mut rng),
            Err(Error::NoNegativeWindow)
        ));
    }

    #[test]
    fn best_positive_picks_max_overlap() {
        let ws = slice_windows(300, 90, 1.0).unwrap();
        let gt = Span::new(100.0, 130.0).unwrap();
        assert_eq!(best_positive_window(&ws, &gt).unwrap().index, 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn window_invariants(lv in 1usize..2000, lw in 2usize..300) {
            let ws = slice_windows(lv, lw, 2.0).unwrap();
            let s = lw / 2;
            prop_assert_eq!(ws.stride, s);
            let mut covered = vec![false; lv];
            for (i, w) in ws.windows.iter().enumerate() {
                prop_assert_eq!(w.index, i);
                prop_assert!(w.start_feature + w.length <= lv);
                if lv >= lw {
                    prop_assert_eq!(w.length, lw);
                } else {
                    prop_assert_eq!(w.length, lv);
                }
                for c in &mut covered[w.range()] {
                    *c = true;
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
            for pair in ws.windows.windows(2) {
                prop_assert!(pair[0].start_feature < pair[1].start_feature);
            }
            // consecutive strided windows overlap by L_w - floor(L_w/2)
            let strided = ws.windows.iter().take_while(|w| w.start_feature % s.max(1) == 0).count();
            for pair in ws.windows[..strided].windows(2) {
                if pair[1].start_feature - pair[0].start_feature == s {
                    let overlap = pair[0].start_feature + lw - pair[1].start_feature;
                    prop_assert_eq!(overlap, lw - s);
                }
            }
            prop_assert!(ws.len() <= lv.div_ceil(s) + 1);
        }

        #[test]
        fn label_matches_intersection(
            ws_start in 0.0..100.0f64, gs in 0.0..120.0f64, gd in 0.01..30.0f64
        ) {
            let w = Window {
                index: 0,
                start_feature: 0,
                length: 1,
                span_seconds: Span::new(ws_start, ws_start + 20.0).unwrap(),
            };
            let gt = Span::new(gs, gs + gd).unwrap();
            let positive = label_window(&w, &gt) == WindowLabel::Positive;
            prop_assert_eq!(positive, w.span_seconds.intersection(&gt) > 0.0);
            prop_assert_eq!(positive, crate::span::iou(&w.span_seconds, &gt) > 0.0);
        }
    }
}
