//! Two-stage inference: retrieve videos, localize inside each, merge by the
//! combined score `cm = re/t + lf_st[i] + lf_ed[j]`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureCorpus, QueryRecord};
use crate::diff::ParameterSet;
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::localizer::Localizer;
use crate::parallel::{self, Execution};
use crate::retriever::{CorpusIndex, Retriever};

/// A scored inclusive span `[st, ed]` inside one video.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScoredSpan {
    pub st: usize,
    pub ed: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentPrediction {
    pub video_id: String,
    pub st: usize,
    pub ed: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Videos retrieved per query.
    pub top_k: usize,
    /// Longest candidate span; `None` allows the whole video.
    pub l_max: Option<usize>,
    /// Candidates kept per video before NMS.
    pub top_n: usize,
    pub nms_threshold: f64,
    pub temperature: f64,
    /// Predictions kept per query after the global sort.
    pub max_predictions: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            l_max: None,
            top_n: 100,
            nms_threshold: 0.5,
            temperature: 0.01,
            max_predictions: 100,
        }
    }
}

/// Retrieved videos as `(video_id, re)`.
pub fn retrieve_videos(
    retriever: (&Retriever, &ParameterSet),
    index: &CorpusIndex,
    query: &QueryRecord,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let q = retriever.0.encode_query(retriever.1, &query.token_features.to_matrix())?;
    Ok(index
        .retrieve(&q, k, Execution::Sequential)?
        .into_iter()
        .map(|(v, s)| (index.video_ids()[v].clone(), s))
        .collect())
}

fn by_score_then_span(a: &ScoredSpan, b: &ScoredSpan) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.st.cmp(&b.st))
        .then(a.ed.cmp(&b.ed))
}

/// Every span `i ≤ j ≤ i + l_max − 1` scored `lf_st[i] + lf_ed[j]`; the best
/// `top_n` by score, ties by `(i, j)`.
pub fn generate_moments(lf_st: &[f64], lf_ed: &[f64], l_max: usize, top_n: usize) -> Result<Vec<ScoredSpan>> {
    if l_max == 0 {
        return Err(Error::Argument("L_max must be >= 1".into()));
    }
    if lf_st.len() != lf_ed.len() {
        return Err(Error::shape("generate_moments", "start/end lengths differ"));
    }
    let t = lf_st.len();
    let mut out = Vec::new();
    for i in 0..t {
        for j in i..t.min(i + l_max) {
            out.push(ScoredSpan {
                st: i,
                ed: j,
                score: lf_st[i] + lf_ed[j],
            });
        }
    }
    out.sort_by(by_score_then_span);
    out.truncate(top_n);
    Ok(out)
}

/// Greedy non-maximum suppression: keep the best remaining span, drop those with
/// IoU above `threshold` against it.
pub fn nms(moments: &[ScoredSpan], threshold: f64) -> Vec<ScoredSpan> {
    let mut rest = moments.to_vec();
    rest.sort_by(by_score_then_span);
    let mut kept: Vec<ScoredSpan> = Vec::new();
    for m in rest {
        if kept.iter().all(|k| iou((k.st, k.ed), (m.st, m.ed)) <= threshold) {
            kept.push(m);
        }
    }
    kept
}

/// Candidate spans of one video for one query, after NMS, scored by `lf_st + lf_ed`.
pub fn localize(
    localizer: (&Localizer, &ParameterSet),
    video: &crate::corpus::VideoRecord,
    query: &QueryRecord,
    cfg: &InferenceConfig,
) -> Result<Vec<ScoredSpan>> {
    let p = localizer.0.profile(localizer.1, video, &query.token_features.to_matrix())?;
    let l_max = cfg.l_max.unwrap_or(video.num_frames());
    let cands = generate_moments(&p.lf_st, &p.lf_ed, l_max, cfg.top_n)?;
    Ok(nms(&cands, cfg.nms_threshold))
}

/// Sort key shared by every prediction list.
pub fn sort_predictions(preds: &mut [MomentPrediction]) {
    preds.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then(a.st.cmp(&b.st))
            .then(a.ed.cmp(&b.ed))
    });
}

/// Single-video moment retrieval inside the query's ground-truth video.
pub fn svmr(
    localizer: (&Localizer, &ParameterSet),
    corpus: &FeatureCorpus,
    query: &QueryRecord,
    cfg: &InferenceConfig,
) -> Result<Vec<MomentPrediction>> {
    let video = corpus
        .video(&query.video_id)
        .ok_or_else(|| Error::Argument(format!("unknown video {}", query.video_id)))?;
    let mut out: Vec<MomentPrediction> = localize(localizer, video, query, cfg)?
        .into_iter()
        .map(|s| MomentPrediction {
            video_id: video.video_id.clone(),
            st: s.st,
            ed: s.ed,
            score: s.score,
        })
        .collect();
    sort_predictions(&mut out);
    out.truncate(cfg.max_predictions);
    Ok(out)
}

/// Corpus-level moment score `re / t + lf_st[i] + lf_ed[j]`, where `span_score`
/// is the localizer's `lf_st[i] + lf_ed[j]`.
pub fn moment_score(re: f64, temperature: f64, span_score: f64) -> f64 {
    re / temperature + span_score
}

/// Full corpus moment retrieval for one query.
pub fn vcmr(
    retriever: (&Retriever, &ParameterSet),
    index: &CorpusIndex,
    localizer: (&Localizer, &ParameterSet),
    corpus: &FeatureCorpus,
    query: &QueryRecord,
    cfg: &InferenceConfig,
    exec: Execution,
) -> Result<Vec<MomentPrediction>> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Argument("temperature must be > 0".into()));
    }
    let videos = retrieve_videos(retriever, index, query, cfg.top_k)?;
    let per_video = parallel::map(exec, &videos, |(vid, re)| -> Result<Vec<MomentPrediction>> {
        let video = corpus
            .video(vid)
            .ok_or_else(|| Error::Argument(format!("index video {vid} missing from corpus")))?;
        Ok(localize(localizer, video, query, cfg)?
            .into_iter()
            .map(|s| MomentPrediction {
                video_id: vid.clone(),
                st: s.st,
                ed: s.ed,
                score: moment_score(*re, cfg.temperature, s.score),
            })
            .collect())
    });
    let mut out = Vec::new();
    for r in per_video {
        out.extend(r?);
    }
    sort_predictions(&mut out);
    out.truncate(cfg.max_predictions);
    Ok(out)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    query_id: &'a str,
    video_id: &'a str,
    st: usize,
    ed: usize,
    score: f64,
}

/// JSONL dump, one line per prediction, queries in the given order and
/// predictions in rank order.
pub fn write_predictions(path: &Path, preds: &[(String, Vec<MomentPrediction>)]) -> Result<()> {
    let mut out = String::new();
    for (qid, list) in preds {
        for p in list {
            let line = PredictionLine {
                query_id: qid,
                video_id: &p.video_id,
                st: p.st,
                ed: p.ed,
                score: p.score,
            };
            out.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
            out.push('\n');
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::ingest(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRecord {
    query_id: String,
    video_id: String,
    st: usize,
    ed: usize,
    score: f64,
}

/// Reads a dump written by [`write_predictions`], grouped by query in file order.
pub fn read_predictions(path: &Path) -> Result<Vec<(String, Vec<MomentPrediction>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e))?;
    let mut out: Vec<(String, Vec<MomentPrediction>)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("{}:{}", path.display(), n + 1), "prediction record", e))?;
        let p = MomentPrediction {
            video_id: r.video_id,
            st: r.st,
            ed: r.ed,
            score: r.score,
        };
        match out.last_mut() {
            Some((q, list)) if *q == r.query_id => list.push(p),
            _ => out.push((r.query_id, vec![p])),
        }
    }
    Ok(out)
}
