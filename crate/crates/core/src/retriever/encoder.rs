//! Hierarchical video encoder and query encoder, expressed on a [`Tape`].
//!
//! The same building blocks serve both towers of the retriever and, with
//! cross-attention enabled, the fused encoder of the localizer.

use rand_chacha::ChaCha8Rng;

use crate::corpus::VideoRecord;
use crate::diff::nn::{distance_matrix, AnchorFormer, AnchorMaskSpec, EncoderShape, HeadMasks, Linear};
use crate::diff::{Matrix, ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::events::{self, EventSegmentation, Strategy};

use super::ModelConfig;

/// Tape handles of one encoded video.
#[derive(Clone, Debug)]
pub struct VideoVars {
    /// F̄, `T × D`.
    pub frames: Var,
    /// S̄, `T × D`.
    pub subtitles: Option<Var>,
    /// Ê, `N × D`.
    pub events: Var,
    /// Ŝ, `T × D`.
    pub event_subtitles: Option<Var>,
    pub segmentation: EventSegmentation,
}

/// Tape handles of one encoded query.
#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    /// w̄, `L × D`.
    pub tokens: Var,
    /// `1 × D`; present when the encoder pools.
    pub q_f: Option<Var>,
    pub q_s: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    frame_proj: Linear,
    subtitle_proj: Option<Linear>,
    position: String,
    frame_modality: String,
    subtitle_modality: String,
    event_modality: String,
    event_subtitle_modality: String,
    frame_former: AnchorFormer,
    event_former: AnchorFormer,
    frame_spec: AnchorMaskSpec,
    event_spec: AnchorMaskSpec,
    strategy: Strategy,
    max_frames: usize,
    dim: usize,
}

impl VideoEncoder {
    pub fn init(
        params: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
        cross_attention: bool,
    ) -> Result<Self> {
        let d = cfg.dim;
        let frame_proj = Linear::init(params, rng, &format!("{name}.frame_proj"), cfg.frame_in, d, true)?;
        let subtitle_proj = match cfg.subtitle_in {
            Some(s) => Some(Linear::init(params, rng, &format!("{name}.subtitle_proj"), s, d, true)?),
            None => None,
        };
        let emb = |params: &mut ParameterSet, rng: &mut ChaCha8Rng, what: &str, rows: usize| {
            let n = format!("{name}.{what}");
            params.init_uniform(&n, rows, d, d, rng).map(|_| n)
        };
        let position = emb(params, rng, "position", cfg.max_frames)?;
        let frame_modality = emb(params, rng, "modality.frame", 1)?;
        let subtitle_modality = emb(params, rng, "modality.subtitle", 1)?;
        let event_modality = emb(params, rng, "modality.event", 1)?;
        let event_subtitle_modality = emb(params, rng, "modality.event_subtitle", 1)?;
        let shape = EncoderShape {
            dim: d,
            layers: cfg.layers,
            heads: cfg.heads,
            ff_mult: cfg.ff_mult,
            cross_attention,
        };
        let frame_former = AnchorFormer::init(params, rng, &format!("{name}.frame_former"), shape)?;
        let event_former = AnchorFormer::init(params, rng, &format!("{name}.event_former"), shape)?;
        Ok(Self {
            frame_proj,
            subtitle_proj,
            position,
            frame_modality,
            subtitle_modality,
            event_modality,
            event_subtitle_modality,
            frame_former,
            event_former,
            frame_spec: AnchorMaskSpec::round_robin(&cfg.frame_anchors, cfg.heads),
            event_spec: AnchorMaskSpec::round_robin(&cfg.event_anchors, cfg.heads),
            strategy: cfg.strategy,
            max_frames: cfg.max_frames,
            dim: d,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Encodes `video`; `context` (query token reps) feeds the cross-attention
    /// layers when the encoder has them.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        video: &VideoRecord,
        context: Option<Var>,
    ) -> Result<VideoVars> {
        let t = video.num_frames();
        if t > self.max_frames {
            return Err(Error::shape(
                "encode_video",
                format!("{} has {t} frames, positional table holds {}", video.video_id, self.max_frames),
            ));
        }
        let subtitles = match (&video.subtitle_features, &self.subtitle_proj) {
            (Some(s), Some(p)) => Some((s, p)),
            (None, None) => None,
            _ => {
                return Err(Error::shape(
                    "encode_video",
                    format!("{}: subtitle presence differs from the model", video.video_id),
                ))
            }
        };
        let table = tape.param(params, &self.position)?;
        let pos = tape.slice_rows(table, 0, t)?;

        let raw = tape.constant(video.frame_features.to_matrix());
        let x = self.frame_proj.forward(tape, params, raw)?;
        let x = tape.add(x, pos)?;
        let m = tape.param(params, &self.frame_modality)?;
        let mut tokens = vec![tape.add_row(x, m)?];
        let mut times: Vec<f64> = (0..t).map(|i| i as f64).collect();
        if let Some((s, proj)) = subtitles {
            let raw = tape.constant(s.to_matrix());
            let y = proj.forward(tape, params, raw)?;
            let y = tape.add(y, pos)?;
            let m = tape.param(params, &self.subtitle_modality)?;
            tokens.push(tape.add_row(y, m)?);
            times.extend((0..t).map(|i| i as f64));
        }
        let seq = tape.concat_rows(&tokens)?;
        let masks = self.frame_spec.masks(&distance_matrix(&times, &times));
        let out = self.frame_former.forward(tape, params, seq, &masks, context)?;
        let frames = tape.slice_rows(out, 0, t)?;
        let subs = if subtitles.is_some() {
            Some(tape.slice_rows(out, t, 2 * t)?)
        } else {
            None
        };

        let segmentation = events::segment(tape.value(frames), self.strategy)?;
        let n = segmentation.len();
        let pooled = tape.max_pool_rows(frames, &segmentation.as_pairs())?;
        let m = tape.param(params, &self.event_modality)?;
        let mut tokens = vec![tape.add_row(pooled, m)?];
        if let Some(s) = subs {
            let m = tape.param(params, &self.event_subtitle_modality)?;
            tokens.push(tape.add_row(s, m)?);
        }
        let seq = tape.concat_rows(&tokens)?;
        let masks = self
            .event_spec
            .masks(&event_distances(&segmentation, subs.is_some()));
        let out = self.event_former.forward(tape, params, seq, &masks, context)?;
        let events = tape.slice_rows(out, 0, n)?;
        let event_subtitles = if subs.is_some() {
            Some(tape.slice_rows(out, n, n + t)?)
        } else {
            None
        };
        Ok(VideoVars {
            frames,
            subtitles: subs,
            events,
            event_subtitles,
            segmentation,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Distances for the event-level sequence `[events; subtitles]`: event index
/// distance between events, time distance to the span center between an event
/// and a subtitle, time distance between subtitles.
pub fn event_distances(seg: &EventSegmentation, with_subtitles: bool) -> Matrix {
    let n = seg.len();
    let t = if with_subtitles { seg.num_frames() } else { 0 };
    let centers: Vec<f64> = seg.spans().iter().map(|s| s.center()).collect();
    let mut m = Matrix::zeros(n + t, n + t);
    for i in 0..n + t {
        for j in 0..n + t {
            let d = match (i < n, j < n) {
                (true, true) => i.abs_diff(j) as f64,
                (true, false) => (centers[i] - (j - n) as f64).abs(),
                (false, true) => (centers[j] - (i - n) as f64).abs(),
                (false, false) => (i - n).abs_diff(j - n) as f64,
            };
            m.set(i, j, d);
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct QueryEncoder {
    proj: Linear,
    position: String,
    former: AnchorFormer,
    heads: usize,
    pool_f: Option<Linear>,
    pool_s: Option<Linear>,
    max_len: usize,
}

impl QueryEncoder {
    /// `pool` adds the modality-specific pooling weights `W_F` (and `W_S`
    /// when the model has subtitles).
    pub fn init(
        params: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
        pool: bool,
    ) -> Result<Self> {
        let d = cfg.dim;
        let proj = Linear::init(params, rng, &format!("{name}.proj"), cfg.query_in, d, true)?;
        let position = format!("{name}.position");
        params.init_uniform(&position, cfg.max_query_len, d, d, rng)?;
        let shape = EncoderShape {
            dim: d,
            layers: cfg.layers,
            heads: cfg.heads,
            ff_mult: cfg.ff_mult,
            cross_attention: false,
        };
        let former = AnchorFormer::init(params, rng, &format!("{name}.former"), shape)?;
        let pool_f = if pool {
            Some(Linear::init(params, rng, &format!("{name}.pool_f"), d, 1, false)?)
        } else {
            None
        };
        let pool_s = if pool && cfg.subtitle_in.is_some() {
            Some(Linear::init(params, rng, &format!("{name}.pool_s"), d, 1, false)?)
        } else {
            None
        };
        Ok(Self {
            proj,
            position,
            former,
            heads: cfg.heads,
            pool_f,
            pool_s,
            max_len: cfg.max_query_len,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, tokens: &Matrix) -> Result<QueryVars> {
        let l = tokens.rows();
        if l == 0 || l > self.max_len {
            return Err(Error::shape(
                "encode_query",
                format!("query length {l} outside 1..={}", self.max_len),
            ));
        }
        let raw = tape.constant(tokens.clone());
        let x = self.proj.forward(tape, params, raw)?;
        let table = tape.param(params, &self.position)?;
        let pos = tape.slice_rows(table, 0, l)?;
        let x = tape.add(x, pos)?;
        let w = self.former.forward(tape, params, x, &HeadMasks::unmasked(self.heads), None)?;
        let q_f = match &self.pool_f {
            Some(p) => Some(modality_pool(tape, params, p, w)?),
            None => None,
        };
        let q_s = match &self.pool_s {
            Some(p) => Some(modality_pool(tape, params, p, w)?),
            None => None,
        };
        Ok(QueryVars { tokens: w, q_f, q_s })
    }
}

/// `o = w̄·W_d`, `α = softmax(o)` over tokens, result `αᵀ w̄` (`1 × D`).
fn modality_pool(tape: &mut Tape, params: &ParameterSet, w_d: &Linear, tokens: Var) -> Result<Var> {
    let o = w_d.forward(tape, params, tokens)?;
    let row = tape.transpose(o);
    let alpha = tape.softmax_rows(row);
    tape.matmul(alpha, tokens)
}
