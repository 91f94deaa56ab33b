//! Two-branch contrastive training of the retriever.
//!
//! Each query contributes a frame-branch loss `L_F = L^f + ω·L^f_w + L^q` and an
//! event-branch loss of the same shape; the total is `λ·L_F + L_E`, averaged
//! over the batch. Negatives are the other ground-truth videos of the batch.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureCorpus, Moment, Split};
use crate::diff::checkpoint::save_checkpoint;
use crate::diff::optim::{clip_global_norm, Optimizer, OptimizerKind};
use crate::diff::tensor::cosine;
use crate::diff::{Gradients, ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::retriever::{ModelConfig, QueryEncoding, QueryVars, Retriever, VideoEncoding, VideoVars, COSINE_EPS};

/// `−log(e^{pos/t} / (e^{pos/t} + Σ e^{neg/t}))`, max-subtracted, with `ln_1p`
/// when the positive is the largest logit. Zero without negatives.
pub fn info_nce(pos: f64, negs: &[f64], t: f64) -> f64 {
    let p = pos / t;
    let m = negs.iter().map(|n| n / t).fold(p, f64::max);
    let rest: f64 = negs.iter().map(|n| (n / t - m).exp()).sum();
    if m == p {
        rest.ln_1p()
    } else {
        (m - p) + ((p - m).exp() + rest).ln()
    }
}

/// Frame-query similarity: mean of the visual and subtitle cosines, or the
/// visual cosine alone.
pub fn similarity_rf(q: &QueryEncoding, frame: &[f64], subtitle: Option<&[f64]>) -> f64 {
    let v = cosine(&q.q_f, frame, COSINE_EPS);
    match (&q.q_s, subtitle) {
        (Some(qs), Some(s)) => 0.5 * (v + cosine(qs, s, COSINE_EPS)),
        _ => v,
    }
}

/// `rf` for every frame of `v`.
pub fn frame_scores(q: &QueryEncoding, v: &VideoEncoding) -> Vec<f64> {
    (0..v.frames.rows())
        .map(|t| similarity_rf(q, v.frames.row(t), v.subtitles.as_ref().map(|s| s.row(t))))
        .collect()
}

/// Event `e` scored with the subtitle of frame `frame`.
pub fn event_score(q: &QueryEncoding, v: &VideoEncoding, e: usize, frame: usize) -> f64 {
    let ev = cosine(&q.q_f, v.events.row(e), COSINE_EPS);
    match (&q.q_s, &v.event_subtitles) {
        (Some(qs), Some(s)) => 0.5 * (ev + cosine(qs, s.row(frame), COSINE_EPS)),
        _ => ev,
    }
}

/// Index of the first maximum of `xs[i]` over `idx`.
fn argmax_by(idx: impl Iterator<Item = usize>, xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in idx {
        if best.is_none_or(|b| xs[i] > xs[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Frame,
    Event,
}

/// Hardest item of one negative video. For the event branch `subtitle` is the
/// frame whose Ŝ row scored best.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Negative {
    pub video: usize,
    pub index: usize,
    pub subtitle: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContrastiveSample {
    pub branch: Branch,
    pub positive: usize,
    pub weak_positive: Option<usize>,
    pub negatives: Vec<Negative>,
    /// Frame whose subtitle accompanies the positive (event branch).
    pub positive_frame: usize,
    pub weak_frame: Option<usize>,
}

fn frame_selection(scores: &[f64], moment: Moment) -> (usize, Option<usize>) {
    let pos = argmax_by(moment.start..moment.end, scores).expect("moment is non-empty");
    let weak = argmax_by((0..scores.len()).filter(|&t| !moment.contains(t)), scores);
    (pos, weak)
}

fn hardest_frame(scores: &[f64]) -> usize {
    argmax_by(0..scores.len(), scores).expect("videos have frames")
}

/// Hardest event and subtitle row of one video from the visual cosines over Ê
/// and the subtitle cosines over Ŝ.
fn hardest_event(event_cos: &[f64], subtitle_cos: Option<&[f64]>) -> (usize, Option<usize>) {
    let e = argmax_by(0..event_cos.len(), event_cos).expect("videos have events");
    let s = subtitle_cos.map(|s| argmax_by(0..s.len(), s).expect("videos have frames"));
    (e, s)
}

/// `negatives` pairs each negative video's corpus index with its encoding.
pub fn sample_frame_branch(
    q: &QueryEncoding,
    pos_video: &VideoEncoding,
    moment: Moment,
    negatives: &[(usize, &VideoEncoding)],
) -> ContrastiveSample {
    let (positive, weak_positive) = frame_selection(&frame_scores(q, pos_video), moment);
    ContrastiveSample {
        branch: Branch::Frame,
        positive,
        weak_positive,
        negatives: negatives
            .iter()
            .map(|&(video, v)| Negative {
                video,
                index: hardest_frame(&frame_scores(q, v)),
                subtitle: None,
            })
            .collect(),
        positive_frame: positive,
        weak_frame: weak_positive,
    }
}

fn cosines(q: &[f64], m: &crate::diff::Matrix) -> Vec<f64> {
    (0..m.rows()).map(|r| cosine(q, m.row(r), COSINE_EPS)).collect()
}

pub fn sample_event_branch(
    q: &QueryEncoding,
    pos_video: &VideoEncoding,
    frame: &ContrastiveSample,
    negatives: &[(usize, &VideoEncoding)],
) -> ContrastiveSample {
    let seg = &pos_video.segmentation;
    let positive = seg.event_of(frame.positive).expect("positive frame inside video");
    let weak = frame
        .weak_positive
        .map(|w| (seg.event_of(w).expect("weak frame inside video"), w))
        .filter(|&(e, _)| e != positive);
    ContrastiveSample {
        branch: Branch::Event,
        positive,
        weak_positive: weak.map(|w| w.0),
        negatives: negatives
            .iter()
            .map(|&(video, v)| {
                let ev = cosines(&q.q_f, &v.events);
                let sub = match (&q.q_s, &v.event_subtitles) {
                    (Some(qs), Some(s)) => Some(cosines(qs, s)),
                    _ => None,
                };
                let (index, subtitle) = hardest_event(&ev, sub.as_deref());
                Negative { video, index, subtitle }
            })
            .collect(),
        positive_frame: frame.positive,
        weak_frame: weak.map(|w| w.1),
    }
}

/// Similarities entering one branch loss of one query.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BranchTerms {
    pub pos: f64,
    pub weak: Option<f64>,
    pub negs: Vec<f64>,
    /// Other in-batch queries scored against the positive.
    pub reverse_negs: Vec<f64>,
}

/// `InfoNCE(pos) + ω·InfoNCE(weak) + InfoNCE_reverse(pos)`.
pub fn branch_loss(terms: &BranchTerms, omega: f64, t: f64) -> f64 {
    let mut l = info_nce(terms.pos, &terms.negs, t);
    if let Some(w) = terms.weak {
        l += omega * info_nce(w, &terms.negs, t);
    }
    l + info_nce(terms.pos, &terms.reverse_negs, t)
}

pub fn total_retriever_loss(frame_loss: f64, event_loss: f64, lambda: f64) -> f64 {
    lambda * frame_loss + event_loss
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub temperature: f64,
    pub omega: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            omega: 0.5,
            lambda: 0.8,
        }
    }
}

/// Normalized tape views of one video.
struct VideoUnit {
    frames: Var,
    subtitles: Option<Var>,
    events: Var,
    event_subtitles: Option<Var>,
}

struct QueryUnit {
    q_f: Var,
    q_s: Option<Var>,
}

/// Per-pair similarity rows on the tape.
struct PairSims {
    /// `rf` per frame, `1 × T`.
    rf: Var,
    /// cos(Q_F, Ê), `1 × N`.
    event_cos: Var,
    /// cos(Q_S, Ŝ), `1 × T`.
    subtitle_cos: Option<Var>,
}

fn pair_sims(tape: &mut Tape, q: &QueryUnit, v: &VideoUnit) -> Result<PairSims> {
    let fv = tape.matmul_bt(q.q_f, v.frames)?;
    let rf = match (q.q_s, v.subtitles) {
        (Some(qs), Some(s)) => {
            let fs = tape.matmul_bt(qs, s)?;
            let sum = tape.add(fv, fs)?;
            tape.scale(sum, 0.5)
        }
        _ => fv,
    };
    let event_cos = tape.matmul_bt(q.q_f, v.events)?;
    let subtitle_cos = match (q.q_s, v.event_subtitles) {
        (Some(qs), Some(s)) => Some(tape.matmul_bt(qs, s)?),
        _ => None,
    };
    Ok(PairSims { rf, event_cos, subtitle_cos })
}

/// Event score `½(cos(Q_F, Ê[e]) + cos(Q_S, Ŝ[s]))` on the tape.
fn event_term(tape: &mut Tape, p: &PairSims, e: usize, s: Option<usize>) -> Result<Var> {
    let ev = tape.pick(p.event_cos, &[(0, e)])?;
    match (p.subtitle_cos, s) {
        (Some(sc), Some(s)) => {
            let sv = tape.pick(sc, &[(0, s)])?;
            let sum = tape.add(ev, sv)?;
            Ok(tape.scale(sum, 0.5))
        }
        _ => Ok(ev),
    }
}

/// InfoNCE on the tape; `None` when there are no negatives (the term is zero).
pub(crate) fn nce(tape: &mut Tape, pos: Var, negs: &[Var], t: f64) -> Result<Option<Var>> {
    if negs.is_empty() {
        return Ok(None);
    }
    let mut parts = vec![pos];
    parts.extend_from_slice(negs);
    let row = tape.concat_cols(&parts)?;
    let scaled = tape.scale(row, 1.0 / t);
    let lse = tape.log_sum_exp(scaled);
    let p = tape.scale(pos, 1.0 / t);
    Ok(Some(tape.sub(lse, p)?))
}

fn sum_terms(tape: &mut Tape, terms: &[(f64, Option<Var>)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if let Some(v) = v {
            let v = if w == 1.0 { v } else { tape.scale(v, w) };
            acc = Some(match acc {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
        }
    }
    Ok(acc)
}

/// Loss of one batch on `tape`: the frame and event branch averages and
/// `total = λ·frame + event`.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub frame: Var,
    pub event: Var,
}

/// Builds the retriever loss for the queries `batch` (indices into the corpus
/// queries) on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Retriever,
    params: &ParameterSet,
    corpus: &FeatureCorpus,
    batch: &[usize],
    w: &LossWeights,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let queries: Vec<_> = batch.iter().map(|&i| &corpus.queries()[i]).collect();
    let mut videos: Vec<usize> = Vec::new();
    for q in &queries {
        let v = corpus.video_index(&q.video_id).expect("validated corpus");
        if !videos.contains(&v) {
            videos.push(v);
        }
    }
    let eps = COSINE_EPS;
    let mut units = Vec::with_capacity(videos.len());
    let mut segs = Vec::with_capacity(videos.len());
    for &v in &videos {
        let vv: VideoVars = model.video.forward(tape, params, &corpus.videos()[v], None)?;
        units.push(VideoUnit {
            frames: tape.l2_normalize_rows(vv.frames, eps),
            subtitles: vv.subtitles.map(|s| tape.l2_normalize_rows(s, eps)),
            events: tape.l2_normalize_rows(vv.events, eps),
            event_subtitles: vv.event_subtitles.map(|s| tape.l2_normalize_rows(s, eps)),
        });
        segs.push(vv.segmentation);
    }
    let mut qunits = Vec::with_capacity(queries.len());
    for q in &queries {
        let qv: QueryVars = model.query.forward(tape, params, &q.token_features.to_matrix())?;
        let q_f = qv.q_f.expect("retriever query encoder pools");
        qunits.push(QueryUnit {
            q_f: tape.l2_normalize_rows(q_f, eps),
            q_s: qv.q_s.map(|s| tape.l2_normalize_rows(s, eps)),
        });
    }
    // sims[i][j]: query i against batch video j.
    let mut sims = Vec::with_capacity(qunits.len());
    for q in &qunits {
        let row: Result<Vec<PairSims>> = units.iter().map(|v| pair_sims(tape, q, v)).collect();
        sims.push(row?);
    }
    let gt: Vec<usize> = queries
        .iter()
        .map(|q| {
            let v = corpus.video_index(&q.video_id).expect("validated corpus");
            videos.iter().position(|&x| x == v).expect("batch video")
        })
        .collect();

    let t = w.temperature;
    let mut frame_losses = Vec::new();
    let mut event_losses = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        let g = gt[i];
        let mine = &sims[i][g];
        let rf_vals = tape.value(mine.rf).row(0).to_vec();
        let (p, weak) = frame_selection(&rf_vals, q.moment);

        // Frame branch.
        let pos = tape.pick(mine.rf, &[(0, p)])?;
        let mut negs = Vec::new();
        for (j, s) in sims[i].iter().enumerate() {
            if j != g {
                let hard = hardest_frame(tape.value(s.rf).row(0));
                negs.push(tape.pick(s.rf, &[(0, hard)])?);
            }
        }
        let weak_v = match weak {
            Some(wk) => Some(tape.pick(mine.rf, &[(0, wk)])?),
            None => None,
        };
        let mut reverse = Vec::new();
        for (k, other) in sims.iter().enumerate() {
            if k != i && gt[k] != g {
                reverse.push(tape.pick(other[g].rf, &[(0, p)])?);
            }
        }
        let l_pos = nce(tape, pos, &negs, t)?;
        let l_weak = match weak_v {
            Some(wv) => nce(tape, wv, &negs, t)?,
            None => None,
        };
        let l_rev = nce(tape, pos, &reverse, t)?;
        frame_losses.push(sum_terms(tape, &[(1.0, l_pos), (w.omega, l_weak), (1.0, l_rev)])?);

        // Event branch.
        let seg = &segs[g];
        let e_pos = seg.event_of(p).expect("frame inside video");
        let with_sub = mine.subtitle_cos.is_some();
        let pos = event_term(tape, mine, e_pos, with_sub.then_some(p))?;
        let mut negs = Vec::new();
        for (j, s) in sims[i].iter().enumerate() {
            if j != g {
                let ev = tape.value(s.event_cos).row(0).to_vec();
                let sub = s.subtitle_cos.map(|sc| tape.value(sc).row(0).to_vec());
                let (e, sb) = hardest_event(&ev, sub.as_deref());
                negs.push(event_term(tape, s, e, sb)?);
            }
        }
        let weak_v = match weak.map(|wk| (seg.event_of(wk).expect("frame inside video"), wk)) {
            Some((e, wk)) if e != e_pos => Some(event_term(tape, mine, e, with_sub.then_some(wk))?),
            _ => None,
        };
        let mut reverse = Vec::new();
        for (k, other) in sims.iter().enumerate() {
            if k != i && gt[k] != g {
                reverse.push(event_term(tape, &other[g], e_pos, with_sub.then_some(p))?);
            }
        }
        let l_pos = nce(tape, pos, &negs, t)?;
        let l_weak = match weak_v {
            Some(wv) => nce(tape, wv, &negs, t)?,
            None => None,
        };
        let l_rev = nce(tape, pos, &reverse, t)?;
        event_losses.push(sum_terms(tape, &[(1.0, l_pos), (w.omega, l_weak), (1.0, l_rev)])?);
    }
    let b = batch.len() as f64;
    let avg = |tape: &mut Tape, losses: Vec<Option<Var>>| -> Result<Var> {
        let terms: Vec<(f64, Option<Var>)> = losses.into_iter().map(|v| (1.0 / b, v)).collect();
        Ok(match sum_terms(tape, &terms)? {
            Some(v) => v,
            None => tape.constant(crate::diff::Matrix::scalar(0.0)),
        })
    };
    let frame = avg(tape, frame_losses)?;
    let event = avg(tape, event_losses)?;
    let weighted = tape.scale(frame, w.lambda);
    let total = tape.add(weighted, event)?;
    Ok(BatchLoss { total, frame, event })
}

/// Optimization settings shared by both training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::Sgd,
            clip_norm: None,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Argument("batch_size and lr must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Argument("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn maybe_checkpoint(
        &self,
        epoch: usize,
        params: &ParameterSet,
        model: &impl Serialize,
    ) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            if self.checkpoint_every > 0 && (epoch + 1) % self.checkpoint_every == 0 {
                let json = serde_json::to_value(model).expect("model config serializes");
                save_checkpoint(&dir.join(format!("epoch_{:04}", epoch + 1)), params, &json)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    #[serde(rename = "L_F")]
    pub l_f: f64,
    #[serde(rename = "L_E")]
    pub l_e: f64,
    #[serde(rename = "L")]
    pub l: f64,
}

/// Applies one update; `Training` error on a non-finite loss or gradient.
pub(crate) fn apply_update(
    opt: &mut Optimizer,
    params: &mut ParameterSet,
    mut grads: Gradients,
    loss: f64,
    step: usize,
    clip: Option<f64>,
) -> Result<()> {
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!("loss {loss}"),
        });
    }
    if let Some(c) = clip {
        clip_global_norm(&mut grads, c);
    }
    opt.step(params, &grads);
    if !params.is_finite() {
        return Err(Error::Training {
            step,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok(())
}

/// Shuffled train-split query batches for one epoch.
pub(crate) fn epoch_batches(train: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub struct TrainedRetriever {
    pub model: Retriever,
    pub params: ParameterSet,
    pub log: Vec<StepLog>,
}

/// Trains the retriever on the train split. `on_step` sees every step's losses.
pub fn train_retriever(
    corpus: &FeatureCorpus,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainedRetriever> {
    cfg.validate()?;
    let train = corpus.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Argument("train split is empty".into()));
    }
    let (model, mut params) = Retriever::init(model_cfg, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(&train, cfg.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, &model, &params, corpus, &batch, weights)?;
            let l = tape.value(loss.total).item();
            let grads = tape.backward(loss.total, &params)?;
            apply_update(&mut opt, &mut params, grads, l, step, cfg.clip_norm)?;
            let entry = StepLog {
                step,
                epoch,
                l_f: tape.value(loss.frame).item(),
                l_e: tape.value(loss.event).item(),
                l,
            };
            on_step(&entry);
            log.push(entry);
            step += 1;
        }
        if let Some(last) = log.last() {
            log::debug!("retriever epoch {epoch} step {} loss {:.6}", last.step, last.l);
        }
        cfg.maybe_checkpoint(epoch, &params, &model.config)?;
    }
    Ok(TrainedRetriever { model, params, log })
}
