//! Half-open time spans and temporal IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A half-open interval `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

impl Span {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() || start > end {
            return Err(Error::InvalidSpan { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Length of the overlap with `other`, zero when disjoint or touching.
    pub fn intersection(&self, other: &Span) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Span covered by `features` at the given sampling rate.
    pub fn from_features(range: std::ops::Range<usize>, fps: f64) -> Self {
        Self {
            start: range.start as f64 / fps,
            end: range.end as f64 / fps,
        }
    }
}

/// Temporal intersection-over-union. Zero when the union has zero length.
pub fn iou(a: &Span, b: &Span) -> f64 {
    let inter = a.intersection(b);
    let union = a.duration() + b.duration() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn span(s: f64, e: f64) -> Span {
        Span::new(s, e).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&span(0.0, 10.0), &span(0.0, 10.0)), 1.0);
        assert_eq!(iou(&span(0.0, 10.0), &span(20.0, 30.0)), 0.0);
        assert!((iou(&span(0.0, 10.0), &span(5.0, 15.0)) - 5.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn zero_duration_is_zero() {
        assert_eq!(iou(&span(3.0, 3.0), &span(3.0, 3.0)), 0.0);
        assert_eq!(iou(&span(3.0, 3.0), &span(0.0, 10.0)), 0.0);
    }

    #[test]
    fn rejects_reversed() {
        assert!(Span::new(2.0, 1.0).is_err());
        assert!(Span::new(f64::NAN, 1.0).is_err());
    }

    fn arb_span() -> impl Strategy<Value = Span> {
        (0.0..100.0f64, 0.0..50.0f64).prop_map(|(s, d)| span(s, s + d))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn iou_symmetric(a in arb_span(), b in arb_span()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        }

        #[test]
        fn iou_self_is_one(s in 0.0..100.0f64, d in 1e-3..50.0f64) {
            let a = span(s, s + d);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_in_unit_interval(a in arb_span(), b in arb_span()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
