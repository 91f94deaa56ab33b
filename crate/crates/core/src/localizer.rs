//! One-tower moment localizer.
//!
//! The video is encoded hierarchically with cross-attention to the query's token
//! representations. Frame heads (1-D convolutions over `F̄ + S̄`) score start and
//! end frames; event heads (affine maps over `Ê` plus max-pooled `Ŝ`) score start
//! and end events. Training normalizes each head jointly over the positive and
//! the sampled negative videos (Shared-Norm).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{FeatureCorpus, Moment, Split, VideoRecord};
use crate::diff::nn::{Conv1d, Linear};
use crate::diff::optim::Optimizer;
use crate::diff::tape::log_sum_exp;
use crate::diff::{Gradients, Matrix, ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::events::EventSegmentation;
use crate::parallel::{self, Execution};
use crate::retriever::{check_layout, CorpusIndex, IndexMode, ModelConfig, QueryEncoder, Retriever, VideoEncoder};
use crate::training::{apply_update, epoch_batches, StepLog, TrainConfig};

/// Boundary confidences of one video for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceProfile {
    pub lf_st: Vec<f64>,
    pub lf_ed: Vec<f64>,
    pub le_st: Vec<f64>,
    pub le_ed: Vec<f64>,
    pub segmentation: EventSegmentation,
}

/// Training target: inclusive boundary frames and the events containing them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MomentTarget {
    pub start: usize,
    pub end: usize,
    pub start_event: usize,
    pub end_event: usize,
}

impl MomentTarget {
    pub fn new(moment: Moment, seg: &EventSegmentation) -> Result<Self> {
        if moment.is_empty() || moment.end > seg.num_frames() {
            return Err(Error::Argument(format!(
                "moment [{}, {}) outside [0, {})",
                moment.start,
                moment.end,
                seg.num_frames()
            )));
        }
        let (start, end) = moment.inclusive();
        Ok(Self {
            start,
            end,
            start_event: seg.event_of(start).expect("checked range"),
            end_event: seg.event_of(end).expect("checked range"),
        })
    }
}

/// Per-head Shared-Norm cross-entropies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SharedNormLoss {
    pub frame_start: f64,
    pub frame_end: f64,
    pub event_start: f64,
    pub event_end: f64,
}

impl SharedNormLoss {
    pub fn frame(&self) -> f64 {
        self.frame_start + self.frame_end
    }

    pub fn event(&self) -> f64 {
        self.event_start + self.event_end
    }

    pub fn total(&self, gamma: f64) -> f64 {
        self.frame() + gamma * self.event()
    }
}

fn shared_ce(pos: &[f64], negs: &[&[f64]], target: usize) -> f64 {
    let all: Vec<f64> = pos.iter().chain(negs.iter().flat_map(|n| n.iter())).copied().collect();
    log_sum_exp(&all) - pos[target]
}

/// Shared-Norm loss on plain values.
pub fn shared_norm_loss(
    pos: &ConfidenceProfile,
    target: &MomentTarget,
    negatives: &[&ConfidenceProfile],
) -> Result<SharedNormLoss> {
    let t = pos.lf_st.len();
    let n = pos.le_st.len();
    if target.start >= t || target.end >= t || target.start_event >= n || target.end_event >= n {
        return Err(Error::Argument(format!(
            "target {target:?} outside {t} frames / {n} events"
        )));
    }
    let pick = |f: fn(&ConfidenceProfile) -> &Vec<f64>| -> Vec<&[f64]> {
        negatives.iter().map(|p| f(p).as_slice()).collect()
    };
    Ok(SharedNormLoss {
        frame_start: shared_ce(&pos.lf_st, &pick(|p| &p.lf_st), target.start),
        frame_end: shared_ce(&pos.lf_ed, &pick(|p| &p.lf_ed), target.end),
        event_start: shared_ce(&pos.le_st, &pick(|p| &p.le_st), target.start_event),
        event_end: shared_ce(&pos.le_ed, &pick(|p| &p.le_ed), target.end_event),
    })
}

/// Tape handles of one profile, each `1 × len`.
#[derive(Clone, Debug)]
pub struct ProfileVars {
    pub lf_st: Var,
    pub lf_ed: Var,
    pub le_st: Var,
    pub le_ed: Var,
    pub segmentation: EventSegmentation,
}

/// Tape handles of one query's loss: `total = frame + γ·event`.
#[derive(Clone, Copy, Debug)]
pub struct LocalizerLoss {
    pub total: Var,
    pub frame: Var,
    pub event: Var,
    pub values: SharedNormLoss,
}

#[derive(Clone, Debug)]
pub struct Localizer {
    pub config: ModelConfig,
    query: QueryEncoder,
    video: VideoEncoder,
    conv_st: Conv1d,
    conv_ed: Conv1d,
    head_st: Linear,
    head_ed: Linear,
}

impl Localizer {
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParameterSet)> {
        config.validate()?;
        let mut params = ParameterSet::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let k = config.conv_kernel;
        let query = QueryEncoder::init(&mut params, &mut rng, "loc.query", &config, false)?;
        let video = VideoEncoder::init(&mut params, &mut rng, "loc.video", &config, true)?;
        let conv_st = Conv1d::init(&mut params, &mut rng, "loc.conv_st", k, d, 1)?;
        let conv_ed = Conv1d::init(&mut params, &mut rng, "loc.conv_ed", k, d, 1)?;
        let head_st = Linear::init(&mut params, &mut rng, "loc.event_st", d, 1, true)?;
        let head_ed = Linear::init(&mut params, &mut rng, "loc.event_ed", d, 1, true)?;
        Ok((
            Self {
                config,
                query,
                video,
                conv_st,
                conv_ed,
                head_st,
                head_ed,
            },
            params,
        ))
    }

    pub fn for_params(config: ModelConfig, params: &ParameterSet) -> Result<Self> {
        let (model, fresh) = Self::init(config, params.seed())?;
        check_layout(&fresh, params)?;
        Ok(model)
    }

    /// Names of the start/end heads: `(conv_st, conv_ed, event_st, event_ed)`.
    pub fn heads(&self) -> (&Conv1d, &Conv1d, &Linear, &Linear) {
        (&self.conv_st, &self.conv_ed, &self.head_st, &self.head_ed)
    }

    /// Encodes the query tokens once; the result is the cross-attention context.
    pub fn encode_query(&self, tape: &mut Tape, params: &ParameterSet, tokens: &Matrix) -> Result<Var> {
        Ok(self.query.forward(tape, params, tokens)?.tokens)
    }

    /// Fused encoding and all four confidence sequences of `video` given `context`.
    pub fn profile_vars(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        video: &VideoRecord,
        context: Var,
    ) -> Result<ProfileVars> {
        let v = self.video.forward(tape, params, video, Some(context))?;
        let feats = match v.subtitles {
            Some(s) => tape.add(v.frames, s)?,
            None => v.frames,
        };
        let row = |tape: &mut Tape, x: Var| tape.transpose(x);
        let st = self.conv_st.forward(tape, params, feats)?;
        let ed = self.conv_ed.forward(tape, params, feats)?;
        let lf_st = row(tape, st);
        let lf_ed = row(tape, ed);
        let ev = match v.event_subtitles {
            Some(s) => {
                let pooled = tape.max_pool_rows(s, &v.segmentation.as_pairs())?;
                tape.add(v.events, pooled)?
            }
            None => v.events,
        };
        let est = self.head_st.forward(tape, params, ev)?;
        let eed = self.head_ed.forward(tape, params, ev)?;
        let le_st = row(tape, est);
        let le_ed = row(tape, eed);
        Ok(ProfileVars {
            lf_st,
            lf_ed,
            le_st,
            le_ed,
            segmentation: v.segmentation,
        })
    }

    pub fn profile(&self, params: &ParameterSet, video: &VideoRecord, tokens: &Matrix) -> Result<ConfidenceProfile> {
        let mut tape = Tape::new();
        let ctx = self.encode_query(&mut tape, params, tokens)?;
        let p = self.profile_vars(&mut tape, params, video, ctx)?;
        let vals = |v: Var| tape.value(v).row(0).to_vec();
        Ok(ConfidenceProfile {
            lf_st: vals(p.lf_st),
            lf_ed: vals(p.lf_ed),
            le_st: vals(p.le_st),
            le_ed: vals(p.le_ed),
            segmentation: p.segmentation,
        })
    }

    /// Shared-Norm loss of one query on `tape`.
    pub fn query_loss(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        tokens: &Matrix,
        moment: Moment,
        positive: &VideoRecord,
        negatives: &[&VideoRecord],
        gamma: f64,
    ) -> Result<LocalizerLoss> {
        let ctx = self.encode_query(tape, params, tokens)?;
        let pos = self.profile_vars(tape, params, positive, ctx)?;
        let target = MomentTarget::new(moment, &pos.segmentation)?;
        let mut negs = Vec::with_capacity(negatives.len());
        for v in negatives {
            negs.push(self.profile_vars(tape, params, v, ctx)?);
        }
        let ce = |tape: &mut Tape, f: fn(&ProfileVars) -> Var, target: usize| -> Result<Var> {
            let mut parts = vec![f(&pos)];
            parts.extend(negs.iter().map(f));
            let all = tape.concat_cols(&parts)?;
            let lse = tape.log_sum_exp(all);
            let t = tape.pick(f(&pos), &[(0, target)])?;
            tape.sub(lse, t)
        };
        let fs = ce(tape, |p| p.lf_st, target.start)?;
        let fe = ce(tape, |p| p.lf_ed, target.end)?;
        let es = ce(tape, |p| p.le_st, target.start_event)?;
        let ee = ce(tape, |p| p.le_ed, target.end_event)?;
        let values = SharedNormLoss {
            frame_start: tape.value(fs).item(),
            frame_end: tape.value(fe).item(),
            event_start: tape.value(es).item(),
            event_end: tape.value(ee).item(),
        };
        let frame = tape.add(fs, fe)?;
        let event = tape.add(es, ee)?;
        let weighted = tape.scale(event, gamma);
        Ok(LocalizerLoss {
            total: tape.add(frame, weighted)?,
            frame,
            event,
            values,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct LocalizerWeights {
    pub gamma: f64,
    pub negatives: usize,
    pub negative_pool: usize,
}

impl Default for LocalizerWeights {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            negatives: 5,
            negative_pool: 100,
        }
    }
}

/// For every train query, the retriever's top-`pool` videos minus the correct one.
pub fn negative_pools(
    corpus: &FeatureCorpus,
    retriever: &Retriever,
    retriever_params: &ParameterSet,
    pool: usize,
    exec: Execution,
) -> Result<Vec<(usize, Vec<usize>)>> {
    let enc = retriever.encode_corpus(retriever_params, corpus, exec)?;
    let ids: Vec<String> = corpus.videos().iter().map(|v| v.video_id.clone()).collect();
    let index = CorpusIndex::build(IndexMode::Event, &ids, &enc)?;
    let train = corpus.split_indices(Split::Train);
    parallel::map(exec, &train, |&qi| -> Result<(usize, Vec<usize>)> {
        let q = &corpus.queries()[qi];
        let qe = retriever.encode_query(retriever_params, &q.token_features.to_matrix())?;
        let gt = corpus.video_index(&q.video_id).expect("validated corpus");
        let ranked = index.retrieve(&qe, pool, Execution::Sequential)?;
        Ok((qi, ranked.into_iter().map(|r| r.0).filter(|&v| v != gt).collect()))
    })
    .into_iter()
    .collect()
}

pub struct TrainedLocalizer {
    pub model: Localizer,
    pub params: ParameterSet,
    pub log: Vec<StepLog>,
}

/// Trains the localizer. Negatives per query per epoch are drawn uniformly
/// without replacement from its retriever pool.
pub fn train_localizer(
    corpus: &FeatureCorpus,
    model_cfg: ModelConfig,
    retriever: (&Retriever, &ParameterSet),
    cfg: &TrainConfig,
    weights: &LocalizerWeights,
    exec: Execution,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainedLocalizer> {
    cfg.validate()?;
    let pools = negative_pools(corpus, retriever.0, retriever.1, weights.negative_pool, exec)?;
    if pools.is_empty() {
        return Err(Error::Argument("train split is empty".into()));
    }
    let pool_of: std::collections::HashMap<usize, &Vec<usize>> = pools.iter().map(|(q, p)| (*q, p)).collect();
    let train: Vec<usize> = pools.iter().map(|p| p.0).collect();
    let (model, mut params) = Localizer::init(model_cfg, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(&train, cfg.batch_size, &mut rng) {
            let jobs: Vec<(usize, Vec<usize>)> = batch
                .iter()
                .map(|&qi| {
                    let pool = pool_of[&qi];
                    let k = weights.negatives.min(pool.len());
                    let picks = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
                    (qi, picks)
                })
                .collect();
            let b = jobs.len() as f64;
            let results = parallel::map(exec, &jobs, |(qi, negs)| -> Result<(Gradients, SharedNormLoss)> {
                let q = &corpus.queries()[*qi];
                let pos = corpus.video(&q.video_id).expect("validated corpus");
                let neg_videos: Vec<&VideoRecord> = negs.iter().map(|&v| &corpus.videos()[v]).collect();
                let mut tape = Tape::new();
                let loss = model.query_loss(
                    &mut tape,
                    &params,
                    &q.token_features.to_matrix(),
                    q.moment,
                    pos,
                    &neg_videos,
                    weights.gamma,
                )?;
                let scaled = tape.scale(loss.total, 1.0 / b);
                Ok((tape.backward(scaled, &params)?, loss.values))
            });
            let mut grads = Gradients::zeros_like(&params);
            let mut lf = 0.0;
            let mut le = 0.0;
            for r in results {
                let (g, v) = r?;
                grads.add(&g);
                lf += v.frame() / b;
                le += v.event() / b;
            }
            let l = lf + weights.gamma * le;
            apply_update(&mut opt, &mut params, grads, l, step, cfg.clip_norm)?;
            let entry = StepLog {
                step,
                epoch,
                l_f: lf,
                l_e: le,
                l,
            };
            on_step(&entry);
            log.push(entry);
            step += 1;
        }
        if let Some(last) = log.last() {
            log::debug!("localizer epoch {epoch} step {} loss {:.6}", last.step, last.l);
        }
        cfg.maybe_checkpoint(epoch, &params, &model.config)?;
    }
    Ok(TrainedLocalizer { model, params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Strategy;

    fn flat(t: usize, n: usize) -> ConfidenceProfile {
        let cuts: Vec<usize> = (1..n).collect();
        ConfidenceProfile {
            lf_st: vec![0.0; t],
            lf_ed: vec![0.0; t],
            le_st: vec![0.0; n],
            le_ed: vec![0.0; n],
            segmentation: EventSegmentation::from_boundaries(t, &cuts, Strategy::Window { w: 1 }).unwrap(),
        }
    }

    #[test]
    fn uniform_shared_norm() {
        let pos = flat(2, 1);
        let neg = flat(2, 1);
        let target = MomentTarget::new(Moment::new(0, 2), &pos.segmentation).unwrap();
        let l = shared_norm_loss(&pos, &target, &[&neg]).unwrap();
        assert!((l.frame_start - 4f64.ln()).abs() < 1e-12);
        assert!((l.event_start - 2f64.ln()).abs() < 1e-12);
        let alone = shared_norm_loss(&flat(5, 2), &MomentTarget::new(Moment::new(1, 3), &flat(5, 2).segmentation).unwrap(), &[]).unwrap();
        assert!((alone.frame_end - 5f64.ln()).abs() < 1e-12);
        assert!((alone.total(0.8) - (2.0 * 5f64.ln() + 0.8 * 2.0 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn target_events_contain_boundaries() {
        let seg = EventSegmentation::from_boundaries(8, &[4], Strategy::Window { w: 4 }).unwrap();
        let t = MomentTarget::new(Moment::new(2, 6), &seg).unwrap();
        assert_eq!(t, MomentTarget { start: 2, end: 5, start_event: 0, end_event: 1 });
        assert!(MomentTarget::new(Moment::new(2, 9), &seg).is_err());
    }

    #[test]
    fn out_of_range_target_is_argument_error() {
        let p = flat(3, 1);
        let bad = MomentTarget { start: 3, end: 3, start_event: 0, end_event: 0 };
        assert!(matches!(shared_norm_loss(&p, &bad, &[]), Err(Error::Argument(_))));
    }
}
