//! Recall@k at IoU thresholds, the ablation harness and the window-length sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::datastore::Corpus;
use crate::error::{Error, Result};
use crate::pipeline::{
    ground_corpus, predictions_by_query, prepare_videos, train_models, AutoOr, Grounding,
    PipelineConfig, Prediction, ScoreSource,
};
use crate::ranking::Fusion;
use crate::scorer::ScorerParams;
use crate::span::{iou, Span};

fn hit(p: &Span, gt: &Span, theta: f64, strict: bool) -> bool {
    let u = iou(p, gt);
    if strict {
        u > theta
    } else {
        u >= theta
    }
}

/// Percentage of queries with a top-`k` prediction whose IoU with the ground
/// truth exceeds `theta` (or reaches it when `strict` is false). Queries
/// without predictions count as misses.
pub fn recall_at_k(
    predictions: &BTreeMap<String, Vec<Span>>,
    gts: &BTreeMap<String, Span>,
    k: usize,
    theta: f64,
    strict: bool,
) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let hits = gts
        .par_iter()
        .filter(|(qid, gt)| {
            predictions
                .get(*qid)
                .is_some_and(|ps| ps.iter().take(k).any(|p| hit(p, gt, theta, strict)))
        })
        .count();
    Ok(100.0 * hits as f64 / gts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub k: usize,
    pub theta: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDiagnostics {
    pub query_id: String,
    /// Best (1-based) rank with a hit, per threshold; `None` when no prediction hits.
    pub first_hit_rank: Vec<Option<usize>>,
    pub top1_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recalls: Vec<RecallEntry>,
    pub query_count: usize,
    pub strict: bool,
    pub thresholds: Vec<f64>,
    pub queries: Vec<QueryDiagnostics>,
    /// Resolved configuration, for provenance.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn recall(&self, k: usize, theta: f64) -> Option<f64> {
        self.recalls
            .iter()
            .find(|e| e.k == k && e.theta == theta)
            .map(|e| e.recall)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,theta,recall,queries\n");
        for e in &self.recalls {
            let _ = writeln!(
                out,
                "{},{},{:.4},{}",
                e.k, e.theta, e.recall, self.query_count
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluates ranked predictions against one ground truth per query.
pub fn evaluate(
    predictions: &[Prediction],
    gts: &BTreeMap<String, Span>,
    ks: &[usize],
    thresholds: &[f64],
    strict: bool,
) -> Result<EvalReport> {
    let by_query = predictions_by_query(predictions);
    let spans: BTreeMap<String, Vec<Span>> = by_query
        .iter()
        .map(|(q, ps)| (q.clone(), ps.iter().map(Prediction::span).collect()))
        .collect();
    let mut recalls = Vec::new();
    for &theta in thresholds {
        for &k in ks {
            recalls.push(RecallEntry {
                k,
                theta,
                recall: recall_at_k(&spans, gts, k, theta, strict)?,
            });
        }
    }
    let queries = gts
        .iter()
        .map(|(qid, gt)| {
            let ps = spans.get(qid).map_or(&[][..], Vec::as_slice);
            QueryDiagnostics {
                query_id: qid.clone(),
                first_hit_rank: thresholds
                    .iter()
                    .map(|&t| ps.iter().position(|p| hit(p, gt, t, strict)).map(|i| i + 1))
                    .collect(),
                top1_iou: ps.first().map(|p| iou(p, gt)),
            }
        })
        .collect();
    Ok(EvalReport {
        recalls,
        query_count: gts.len(),
        strict,
        thresholds: thresholds.to_vec(),
        queries,
        config: BTreeMap::new(),
    })
}

pub fn ground_truths(corpus: &Corpus) -> BTreeMap<String, Span> {
    corpus
        .instances
        .iter()
        .map(|i| (i.query_id.clone(), i.gt))
        .collect()
}

pub fn flatten(groundings: &[Grounding]) -> Vec<Prediction> {
    groundings
        .iter()
        .flat_map(|g| g.predictions.iter().cloned())
        .collect()
}

/// Grounds `corpus` with the given models and evaluates with the config's k and θ lists.
pub fn evaluate_models(
    corpus: &Corpus,
    adapter: Option<&AdapterParams>,
    scorer: &ScorerParams,
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    let videos = prepare_videos(corpus, adapter)?;
    let groundings = ground_corpus(corpus, &videos, ScoreSource::Internal(scorer), cfg)?;
    let mut report = evaluate(
        &flatten(&groundings),
        &ground_truths(corpus),
        &cfg.eval_k,
        &cfg.eval_thresholds,
        cfg.iou_strict,
    )?;
    report.config = kv_map(cfg);
    Ok(report)
}

fn kv_map(cfg: &PipelineConfig) -> BTreeMap<String, String> {
    let kv = cfg.to_kv();
    kv.keys()
        .map(|k| (k.to_string(), kv.get(k).unwrap_or_default().to_string()))
        .collect()
}

/// Checkpoints consumed by the ablation harness.
#[derive(Debug, Clone, Default)]
pub struct AblationCheckpoints {
    pub adapter: Option<AdapterParams>,
    /// Scorer trained with the contrastive term.
    pub scorer: Option<ScorerParams>,
    /// Scorer trained with `lambda_con = 0`.
    pub scorer_nocon: Option<ScorerParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoAdapter,
    NoFusion,
    NoContrastive,
    Baseline,
}

impl AblationVariant {
    pub const ALL: [Self; 5] = [
        Self::Full,
        Self::NoAdapter,
        Self::NoFusion,
        Self::NoContrastive,
        Self::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoAdapter => "-adapter",
            Self::NoFusion => "-fusion",
            Self::NoContrastive => "-con",
            Self::Baseline => "baseline",
        }
    }

    fn uses_adapter(self) -> bool {
        matches!(self, Self::Full | Self::NoFusion | Self::NoContrastive)
    }

    fn uses_fusion(self) -> bool {
        matches!(self, Self::Full | Self::NoAdapter | Self::NoContrastive)
    }

    fn uses_contrastive(self) -> bool {
        matches!(self, Self::Full | Self::NoAdapter | Self::NoFusion)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub adapter: bool,
    pub fusion: bool,
    pub contrastive: bool,
    pub report: EvalReport,
}

/// Evaluates the five ablation variants. Each one removes a single component
/// from the full model; the baseline removes all three.
pub fn run_ablation(
    corpus: &Corpus,
    ckpt: &AblationCheckpoints,
    cfg: &PipelineConfig,
) -> Result<Vec<AblationRow>> {
    let need = |x: &Option<ScorerParams>, name: &str| {
        x.clone()
            .ok_or_else(|| Error::MissingCheckpoint(name.to_string()))
    };
    let scorer = need(&ckpt.scorer, "scorer")?;
    let scorer_nocon = need(&ckpt.scorer_nocon, "scorer_nocon")?;
    let adapter = ckpt
        .adapter
        .clone()
        .ok_or_else(|| Error::MissingCheckpoint("adapter".into()))?;
    AblationVariant::ALL
        .iter()
        .map(|&v| {
            let vcfg = PipelineConfig {
                fusion: if v.uses_fusion() {
                    Fusion::Sum
                } else {
                    Fusion::ProposalOnly
                },
                ..cfg.clone()
            };
            let s = if v.uses_contrastive() {
                &scorer
            } else {
                &scorer_nocon
            };
            let a = v.uses_adapter().then_some(&adapter);
            Ok(AblationRow {
                variant: v.name().to_string(),
                adapter: v.uses_adapter(),
                fusion: v.uses_fusion(),
                contrastive: v.uses_contrastive(),
                report: evaluate_models(corpus, a, s, &vcfg)?,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,adapter,fusion,contrastive");
    let Some(first) = rows.first() else {
        out.push('\n');
        return out;
    };
    for e in &first.report.recalls {
        let _ = write!(out, ",R{}@{}", e.k, e.theta);
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.variant, r.adapter, r.fusion, r.contrastive
        );
        for e in &r.report.recalls {
            let _ = write!(out, ",{:.4}", e.recall);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window_length: usize,
    pub report: EvalReport,
}

/// Trains and evaluates the pipeline once per window length.
pub fn sweep_window_length(
    train: &Corpus,
    test: &Corpus,
    lengths: &[usize],
    cfg: &PipelineConfig,
) -> Result<Vec<SweepRow>> {
    lengths
        .iter()
        .map(|&l| {
            let c = PipelineConfig {
                window_length: AutoOr::Value(l),
                ..cfg.clone()
            };
            let models = train_models(train, &c)?;
            let adapter = c.use_adapter.then_some(&models.adapter);
            Ok(SweepRow {
                window_length: l,
                report: evaluate_models(test, adapter, &models.scorer, &c)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("window_length");
    if let Some(first) = rows.first() {
        for e in &first.report.recalls {
            let _ = write!(out, ",R{}@{}", e.k, e.theta);
        }
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}", r.window_length);
        for e in &r.report.recalls {
            let _ = write!(out, ",{:.4}", e.recall);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(a: f64, b: f64) -> Span {
        Span { start: a, end: b }
    }

    /// Scans every prediction of every query.
    fn oracle(preds: &[Vec<Span>], gts: &[Span], k: usize, theta: f64) -> f64 {
        let mut hits = 0;
        for (ps, gt) in preds.iter().zip(gts) {
            let mut found = false;
            for (rank, p) in ps.iter().enumerate() {
                let inter = (p.end.min(gt.end) - p.start.max(gt.start)).max(0.0);
                let union = (p.end - p.start) + (gt.end - gt.start) - inter;
                let u = if union > 0.0 { inter / union } else { 0.0 };
                if rank < k && u > theta {
                    found = true;
                }
            }
            if found {
                hits += 1;
            }
        }
        100.0 * hits as f64 / gts.len() as f64
    }

    fn maps(
        preds: &[Vec<Span>],
        gts: &[Span],
    ) -> (BTreeMap<String, Vec<Span>>, BTreeMap<String, Span>) {
        let p = preds
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("q{i}"), v.clone()))
            .collect();
        let g = gts
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("q{i}"), *v))
            .collect();
        (p, g)
    }

    #[test]
    fn recall_examples() {
        let gt = [s(0.0, 10.0), s(0.0, 10.0)];
        // q1: top-1 iou 0.4; q2: top-1 iou 0.2, rank 3 iou 0.6
        let preds = [
            vec![s(0.0, 4.0)],
            vec![s(0.0, 2.0), s(50.0, 60.0), s(0.0, 6.0)],
        ];
        let (p, g) = maps(&preds, &gt);
        assert_eq!(recall_at_k(&p, &g, 1, 0.3, true).unwrap(), 50.0);
        assert_eq!(recall_at_k(&p, &g, 5, 0.3, true).unwrap(), 100.0);
        let (p, g) = maps(&[vec![s(0.0, 10.0)], vec![s(0.0, 10.0)]], &gt);
        for theta in [0.1, 0.3, 0.5, 0.9] {
            assert_eq!(recall_at_k(&p, &g, 1, theta, true).unwrap(), 100.0);
        }
        let (p, g) = maps(&[vec![s(0.0, 9.0)]], &gt[..1]);
        assert_eq!(recall_at_k(&p, &g, 1, 1.0, true).unwrap(), 0.0);
        assert!(matches!(
            recall_at_k(&p, &BTreeMap::new(), 1, 0.5, true),
            Err(Error::EmptyQuerySet)
        ));
    }

    #[test]
    fn strictness_flag() {
        let gt = [s(0.0, 10.0)];
        let (p, g) = maps(&[vec![s(0.0, 5.0)]], &gt);
        assert_eq!(recall_at_k(&p, &g, 1, 0.5, true).unwrap(), 0.0);
        assert_eq!(recall_at_k(&p, &g, 1, 0.5, false).unwrap(), 100.0);
    }

    #[test]
    fn report_and_csv() {
        let preds = vec![
            Prediction {
                query_id: "a".into(),
                rank: 2,
                start_sec: 0.0,
                end_sec: 10.0,
                score: 1.0,
            },
            Prediction {
                query_id: "a".into(),
                rank: 1,
                start_sec: 30.0,
                end_sec: 40.0,
                score: 2.0,
            },
        ];
        let gts: BTreeMap<String, Span> = [
            ("a".to_string(), s(0.0, 10.0)),
            ("b".to_string(), s(0.0, 1.0)),
        ]
        .into();
        let r = evaluate(&preds, &gts, &[1, 5], &[0.3, 0.5], true).unwrap();
        assert_eq!(r.recall(1, 0.3), Some(0.0));
        assert_eq!(r.recall(5, 0.5), Some(50.0));
        assert_eq!(r.queries[0].first_hit_rank, vec![Some(2), Some(2)]);
        assert_eq!(r.queries[1].first_hit_rank, vec![None, None]);
        assert_eq!(r.to_csv().lines().count(), 5);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn ablation_needs_checkpoints() {
        let corpus = Corpus::default();
        let err = run_ablation(
            &corpus,
            &AblationCheckpoints::default(),
            &PipelineConfig::default(),
        );
        assert!(matches!(err, Err(Error::MissingCheckpoint(_))));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Vec<Span>>, Vec<Span>)> {
        let span = (0u32..40, 1u32..20).prop_map(|(a, l)| s(a as f64, (a + l) as f64));
        prop::collection::vec((prop::collection::vec(span.clone(), 0..8), span), 1..12)
            .prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_oracle((preds, gts) in arb_case(), k in 1usize..8, theta in 0.0..1.0f64) {
            let (p, g) = maps(&preds, &gts);
            let got = recall_at_k(&p, &g, k, theta, true).unwrap();
            prop_assert!((got - oracle(&preds, &gts, k, theta)).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&got));
        }

        #[test]
        fn monotone_in_k_and_theta((preds, gts) in arb_case(), k in 1usize..6, t in 0.0..0.9f64, dt in 0.0..0.1f64) {
            let (p, g) = maps(&preds, &gts);
            prop_assert!(recall_at_k(&p, &g, k, t, true).unwrap() <= recall_at_k(&p, &g, k + 1, t, true).unwrap());
            prop_assert!(recall_at_k(&p, &g, k, t + dt, true).unwrap() <= recall_at_k(&p, &g, k, t, true).unwrap());
        }

        #[test]
        fn appending_below_k_is_inert((preds, gts) in arb_case(), k in 1usize..6, theta in 0.0..1.0f64, extra in 0u32..40) {
            let (p, g) = maps(&preds, &gts);
            let before = recall_at_k(&p, &g, k, theta, true).unwrap();
            let mut more = p.clone();
            for v in more.values_mut() {
                if v.len() >= k {
                    v.push(s(extra as f64, extra as f64 + 5.0));
                }
            }
            prop_assert_eq!(recall_at_k(&more, &g, k, theta, true).unwrap(), before);
        }
    }
}
