//! Runtime harness: per-stage grounding timings swept over the number of
//! selected windows, plus a least-squares linearity check.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::datastore::Corpus;
use crate::error::{Error, Result};
use crate::pipeline::{
    ground, PipelineConfig, PreparedVideo, ScoreSource, StageTimings, WindowCount,
};

/// Stage timings of one grounded query in one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub query_id: String,
    pub k: WindowCount,
    pub repetition: usize,
    pub timings: StageTimings,
    pub windows_processed: usize,
    pub n_windows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmups: usize,
    pub repetitions: usize,
    /// Ground queries in parallel. Off by default so timings stay stable.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmups: 3,
            repetitions: 5,
            parallel: false,
        }
    }
}

/// Median per-repetition timings for one `k`. Stage times are summed over
/// all queries of a repetition before taking the median across repetitions.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub k: WindowCount,
    pub mean_windows_processed: f64,
    pub median: StageTimings,
    pub median_total_ns: u64,
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let n = xs.len();
    if n == 0 {
        0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

fn run_once(
    corpus: &Corpus,
    videos: &BTreeMap<String, PreparedVideo>,
    source: ScoreSource<'_>,
    cfg: &PipelineConfig,
    parallel: bool,
) -> Result<Vec<crate::pipeline::Grounding>> {
    let one = |inst: &crate::datastore::GroundingInstance| {
        let video = videos
            .get(&inst.video_id)
            .ok_or_else(|| Error::UnknownVideo(inst.video_id.clone()))?;
        ground(inst, video, source, cfg)
    };
    if parallel {
        corpus.instances.par_iter().map(one).collect()
    } else {
        corpus.instances.iter().map(one).collect()
    }
}

/// Grounds every query of `corpus` once per `k`, after `warmups` untimed
/// passes, `repetitions` times. Returns one row per `k` and every record.
pub fn bench_pipeline(
    corpus: &Corpus,
    videos: &BTreeMap<String, PreparedVideo>,
    source: ScoreSource<'_>,
    cfg: &PipelineConfig,
    k_values: &[WindowCount],
    bench: &BenchConfig,
) -> Result<(Vec<BenchRow>, Vec<TimingRecord>)> {
    cfg.validate()?;
    if corpus.instances.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let reps = bench.repetitions.max(1);
    let mut rows = Vec::with_capacity(k_values.len());
    let mut records = Vec::new();
    for &k in k_values {
        let kcfg = PipelineConfig {
            top_k_windows: k,
            ..cfg.clone()
        };
        for _ in 0..bench.warmups {
            run_once(corpus, videos, source, &kcfg, bench.parallel)?;
        }
        let mut per_rep: Vec<StageTimings> = Vec::with_capacity(reps);
        let mut processed = 0usize;
        for rep in 0..reps {
            let out = run_once(corpus, videos, source, &kcfg, bench.parallel)?;
            let mut sum = StageTimings::default();
            processed = 0;
            for g in out {
                sum.slice_ns += g.timings.slice_ns;
                sum.select_ns += g.timings.select_ns;
                sum.score_ns += g.timings.score_ns;
                sum.rank_ns += g.timings.rank_ns;
                sum.nms_ns += g.timings.nms_ns;
                processed += g.windows_processed;
                records.push(TimingRecord {
                    query_id: g.query_id,
                    k,
                    repetition: rep,
                    timings: g.timings,
                    windows_processed: g.windows_processed,
                    n_windows: g.n_windows,
                });
            }
            per_rep.push(sum);
        }
        let stage = |f: fn(&StageTimings) -> u64| median(per_rep.iter().map(f).collect());
        rows.push(BenchRow {
            k,
            mean_windows_processed: processed as f64 / corpus.instances.len() as f64,
            median: StageTimings {
                slice_ns: stage(|t| t.slice_ns),
                select_ns: stage(|t| t.select_ns),
                score_ns: stage(|t| t.score_ns),
                rank_ns: stage(|t| t.rank_ns),
                nms_ns: stage(|t| t.nms_ns),
            },
            median_total_ns: stage(StageTimings::total_ns),
        });
    }
    Ok((rows, records))
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s =
        String::from("k,windows_processed,slice_ns,select_ns,score_ns,rank_ns,nms_ns,total_ns\n");
    for r in rows {
        let t = &r.median;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.k,
            r.mean_windows_processed,
            t.slice_ns,
            t.select_ns,
            t.score_ns,
            t.rank_ns,
            t.nms_ns,
            r.median_total_ns
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearity {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `y` on `x`. R² is 1 when `y` is constant.
pub fn linearity_check(points: &[(f64, f64)]) -> Result<Linearity> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(Error::InsufficientPoints(xs.len()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(Linearity {
        slope,
        intercept,
        r_squared,
    })
}

/// Scoring-stage time against windows processed, one point per row.
pub fn score_points(rows: &[BenchRow]) -> Vec<(f64, f64)> {
    rows.iter()
        .map(|r| (r.mean_windows_processed, r.median.score_ns as f64))
        .collect()
}
