//! Recall metrics for VR, SVMR and VCMR, the event-oracle overlap analysis and
//! report formatting.

mod bench;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

pub use bench::{bench_localization, bench_retrieval, BenchReport};

use crate::corpus::{FeatureCorpus, Split};
use crate::error::{Error, Result};
use crate::events::{self, Strategy};
use crate::parallel::{self, Execution};
use crate::pipeline::MomentPrediction;

/// IoU of two inclusive frame spans.
pub fn iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo > hi {
        return 0.0;
    }
    let inter = (hi - lo + 1) as f64;
    let union = ((a.1 - a.0 + 1) + (b.1 - b.0 + 1)) as f64 - inter;
    inter / union
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Percent of queries whose ground-truth video is in the first `k` of its ranking.
pub fn recall_vr(rankings: &[Vec<String>], ground_truth: &[String], k: usize) -> f64 {
    let hits = rankings
        .iter()
        .zip(ground_truth)
        .filter(|(r, g)| r.iter().take(k).any(|v| v == *g))
        .count();
    percent(hits, ground_truth.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentTask {
    /// Predictions outside the correct video are ignored.
    Svmr,
    /// A prediction counts only in the correct video.
    Vcmr,
}

/// Ground truth of one query: video id and inclusive span.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentTruth {
    pub video_id: String,
    pub span: (usize, usize),
}

/// Percent of queries with a top-`k` prediction at IoU ≥ `mu` in the right video.
pub fn recall_moment(
    predictions: &[Vec<MomentPrediction>],
    truth: &[MomentTruth],
    k: usize,
    mu: f64,
    task: MomentTask,
) -> f64 {
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(preds, gt)| {
            let hit = |p: &&MomentPrediction| p.video_id == gt.video_id && iou((p.st, p.ed), gt.span) >= mu;
            match task {
                MomentTask::Vcmr => preds.iter().take(k).any(|p| hit(&p)),
                MomentTask::Svmr => preds
                    .iter()
                    .filter(|p| p.video_id == gt.video_id)
                    .take(k)
                    .any(|p| hit(&p)),
            }
        })
        .count();
    percent(hits, truth.len())
}

/// For each `mu`, the percent of `split` queries whose best-overlapping event
/// (segmenting the raw frame features) has IoU above `mu` with the moment.
pub fn event_oracle_overlap(
    corpus: &FeatureCorpus,
    split: Split,
    strategy: Strategy,
    mus: &[f64],
    exec: Execution,
) -> Result<Vec<f64>> {
    let segs: Vec<_> = parallel::map(exec, corpus.videos(), |v| {
        events::segment(&v.frame_features.to_matrix(), strategy)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let queries = corpus.split_indices(split);
    if queries.is_empty() {
        return Err(Error::Argument(format!("split {split} has no queries")));
    }
    let best: Vec<f64> = queries
        .iter()
        .map(|&qi| {
            let q = &corpus.queries()[qi];
            let seg = &segs[corpus.video_index(&q.video_id).expect("validated corpus")];
            let m = q.moment.inclusive();
            seg.spans()
                .iter()
                .map(|s| iou((s.start, s.end - 1), m))
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(mus
        .iter()
        .map(|&mu| percent(best.iter().filter(|&&b| b > mu).count(), best.len()))
        .collect())
}

pub const VR_KS: [usize; 4] = [1, 5, 10, 100];
pub const MOMENT_KS: [usize; 4] = [1, 5, 10, 100];
pub const IOUS: [f64; 2] = [0.5, 0.7];

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Metric values in percent, rounded to two decimals.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub queries: usize,
    pub metrics: BTreeMap<String, f64>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(split: Split, queries: usize, config: serde_json::Value) -> Self {
        Self {
            split: split.to_string(),
            queries,
            metrics: BTreeMap::new(),
            config,
        }
    }

    pub fn add_vr(&mut self, rankings: &[Vec<String>], truth: &[String]) {
        for k in VR_KS {
            self.metrics
                .insert(format!("VR R@{k}"), round2(recall_vr(rankings, truth, k)));
        }
    }

    pub fn add_moment(&mut self, task: MomentTask, preds: &[Vec<MomentPrediction>], truth: &[MomentTruth]) {
        let name = match task {
            MomentTask::Svmr => "SVMR",
            MomentTask::Vcmr => "VCMR",
        };
        for mu in IOUS {
            for k in MOMENT_KS {
                self.metrics.insert(
                    format!("{name} R@{k} IoU={mu}"),
                    round2(recall_moment(preds, truth, k, mu, task)),
                );
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Aligned two-column table.
    pub fn table(&self) -> String {
        let width = self.metrics.keys().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("split {} ({} queries)\n", self.split, self.queries);
        let _ = writeln!(out, "{:<width$}  {:>7}", "metric", "value");
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "{k:<width$}  {v:>7.2}");
        }
        out
    }
}
