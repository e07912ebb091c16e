//! Dense vector helpers and the row-major embedding matrix used for compute.

use crate::error::{Error, Result};

/// Dot product with a fixed left-to-right f64 accumulation order.
pub fn dot<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += (*x).into() * (*y).into();
    }
    acc
}

/// Maps scores affinely onto `[0, 1]`. An all-equal list maps to 0.5 everywhere.
pub fn min_max_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let range = hi - lo;
    if range <= 0.0 {
        return Ok(vec![0.5; scores.len()]);
    }
    Ok(scores.iter().map(|&x| (x - lo) / range).collect())
}

/// Row-major matrix of f64 embeddings, one row per frame or token.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    dim: usize,
    data: Vec<f64>,
}

impl Embeddings {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: data.len() % dim,
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyInput)?;
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Scales every non-zero row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self) {
        for row in self.data.chunks_exact_mut(self.dim) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
    }

    /// Componentwise mean of the rows in `range`.
    pub fn mean_pool(&self, range: std::ops::Range<usize>) -> Result<Vec<f64>> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::EmptyRange {
                start: range.start,
                end: range.end,
            });
        }
        let n = (range.end - range.start) as f64;
        let mut out = vec![0.0; self.dim];
        for i in range {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|x| *x /= n);
        Ok(out)
    }
}

/// Prefix sums over rows, giving O(d) mean pooling of any contiguous range.
#[derive(Debug, Clone)]
pub struct PrefixSums {
    dim: usize,
    offset: usize,
    sums: Vec<f64>,
}

impl PrefixSums {
    /// Prefix sums over rows `range` of `rows`. Queries use absolute row indices.
    pub fn over(rows: &Embeddings, range: std::ops::Range<usize>) -> Self {
        Self::from_fn(rows.dim(), range, |i, out| out.copy_from_slice(rows.row(i)))
    }

    /// Prefix sums over rows produced by `row(i, out)` for each `i` in `range`.
    pub fn from_fn<F>(dim: usize, range: std::ops::Range<usize>, mut row: F) -> Self
    where
        F: FnMut(usize, &mut [f64]),
    {
        let mut sums = vec![0.0; (range.len() + 1) * dim];
        let mut buf = vec![0.0; dim];
        for (k, i) in range.clone().enumerate() {
            row(i, &mut buf);
            let (prev, next) = sums.split_at_mut((k + 1) * dim);
            let prev = &prev[k * dim..];
            for ((n, p), x) in next[..dim].iter_mut().zip(prev).zip(&buf) {
                *n = p + x;
            }
        }
        Self {
            dim,
            offset: range.start,
            sums,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sum of rows in `range` added into `out`, scaled by `weight`.
    pub fn add_sum(&self, range: std::ops::Range<usize>, weight: f64, out: &mut [f64]) {
        let lo = (range.start - self.offset) * self.dim;
        let hi = (range.end - self.offset) * self.dim;
        for (k, o) in out.iter_mut().enumerate() {
            *o += weight * (self.sums[hi + k] - self.sums[lo + k]);
        }
    }

    pub fn mean(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let n = range.len() as f64;
        self.add_sum(range, 1.0 / n, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(dot(&[0.0, 0.0, 0.0], &[7.0, -2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(dot(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 32.0);
        assert_eq!(dot(&[1.0f32, 2.0], &[3.0f64, 4.0]).unwrap(), 11.0);
    }

    #[test]
    fn dot_dimension_mismatch() {
        assert!(matches!(
            dot(&[1.0, 2.0], &[1.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn min_max_examples() {
        assert_eq!(
            min_max_normalize(&[2.0, 4.0, 6.0]).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(min_max_normalize(&[5.0, 5.0, 5.0]).unwrap(), vec![0.5; 3]);
        assert_eq!(
            min_max_normalize(&[1.0, 3.0, 2.0, 1.0]).unwrap(),
            vec![0.0, 1.0, 0.5, 0.0]
        );
        assert!(matches!(min_max_normalize(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn mean_pool_and_prefix_agree() {
        let e = Embeddings::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(e.mean_pool(0..2).unwrap(), vec![0.5, 0.5]);
        let p = PrefixSums::over(&e, 1..3);
        assert_eq!(p.mean(1..3), vec![1.0, 1.5]);
        assert!(e.mean_pool(2..2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn dot_is_bilinear(
            a in prop::collection::vec(-10.0..10.0f64, 6),
            b in prop::collection::vec(-10.0..10.0f64, 6),
            c in prop::collection::vec(-10.0..10.0f64, 6),
            s in -3.0..3.0f64,
        ) {
            let mut reference = 0.0;
            for i in 0..6 {
                reference += a[i] * b[i];
            }
            prop_assert!((dot(&a, &b).unwrap() - reference).abs() <= 1e-9 * (1.0 + reference.abs()));
            let lhs: Vec<f64> = a.iter().zip(&c).map(|(x, y)| s * x + y).collect();
            let expected = s * dot(&a, &b).unwrap() + dot(&c, &b).unwrap();
            prop_assert!((dot(&lhs, &b).unwrap() - expected).abs() < 1e-8);
        }

        #[test]
        fn min_max_order_and_range(xs in prop::collection::vec(-100.0..100.0f64, 1..40)) {
            let out = min_max_normalize(&xs).unwrap();
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            if hi > lo {
                prop_assert!(out.contains(&0.0));
                prop_assert!(out.contains(&1.0));
                for i in 0..xs.len() {
                    for j in 0..xs.len() {
                        if xs[i] < xs[j] {
                            prop_assert!(out[i] < out[j]);
                        }
                    }
                }
            }
        }

        #[test]
        fn prefix_mean_matches_direct(
            rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 2..20),
            a in 0usize..20, b in 0usize..20,
        ) {
            let e = Embeddings::from_rows(&rows).unwrap();
            let n = e.len();
            let (lo, hi) = (a.min(b) % n, (a.max(b) % n) + 1);
            prop_assume!(lo < hi);
            let p = PrefixSums::over(&e, 0..n);
            let direct = e.mean_pool(lo..hi).unwrap();
            for (x, y) in p.mean(lo..hi).iter().zip(&direct) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
