//! Two-tower event-aware retriever: a hierarchical video encoder (frame-level
//! AnchorFormer, event reasoning, event-level AnchorFormer) and a query encoder
//! with modality-specific pooling, compared by cosine similarity.

mod encoder;
pub mod index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{event_distances, QueryEncoder, QueryVars, VideoEncoder, VideoVars};
pub use index::{CorpusIndex, IndexMode};

use crate::corpus::{FeatureCorpus, VideoRecord};
use crate::diff::nn::AnchorSize;
use crate::diff::tensor::cosine;
use crate::diff::{Matrix, ParameterSet, Tape};
use crate::error::{Error, Result};
use crate::events::{EventSegmentation, EventSpan, Strategy};
use crate::parallel::{self, Execution};

pub const COSINE_EPS: f64 = 1e-8;

/// Architecture of both models. Input widths and table lengths come from the
/// corpus via [`ModelConfig::for_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub frame_anchors: Vec<AnchorSize>,
    pub event_anchors: Vec<AnchorSize>,
    pub strategy: Strategy,
    pub conv_kernel: usize,
    pub frame_in: usize,
    pub subtitle_in: Option<usize>,
    pub query_in: usize,
    pub max_frames: usize,
    pub max_query_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        use AnchorSize::{All, Radius};
        Self {
            dim: 32,
            layers: 2,
            heads: 4,
            ff_mult: 2,
            frame_anchors: vec![Radius(3), Radius(6), Radius(9), All],
            event_anchors: vec![Radius(1), Radius(2), Radius(3), All],
            strategy: Strategy::default(),
            conv_kernel: 5,
            frame_in: 0,
            subtitle_in: None,
            query_in: 0,
            max_frames: 0,
            max_query_len: 0,
        }
    }
}

impl ModelConfig {
    /// Copies input widths and maximum lengths from `corpus`.
    pub fn for_corpus(mut self, corpus: &FeatureCorpus) -> Self {
        self.frame_in = corpus.frame_dim();
        self.subtitle_in = corpus.subtitle_dim();
        self.query_in = corpus.query_dim();
        self.max_frames = corpus.max_frames();
        self.max_query_len = corpus.max_query_len();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.ff_mult == 0 {
            return bad("dim, heads, layers and ff_mult must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv kernel {} must be odd", self.conv_kernel));
        }
        if self.frame_in == 0 || self.query_in == 0 || self.max_frames == 0 || self.max_query_len == 0 {
            return bad("input widths and table lengths must be set from a corpus".into());
        }
        Ok(())
    }
}

/// Values of one encoded video, detached from any tape.
#[derive(Clone, Debug)]
pub struct VideoEncoding {
    pub frames: Matrix,
    pub subtitles: Option<Matrix>,
    pub events: Matrix,
    pub event_subtitles: Option<Matrix>,
    pub segmentation: EventSegmentation,
}

impl VideoEncoding {
    pub fn from_vars(tape: &Tape, v: &VideoVars) -> Self {
        Self {
            frames: tape.value(v.frames).clone(),
            subtitles: v.subtitles.map(|s| tape.value(s).clone()),
            events: tape.value(v.events).clone(),
            event_subtitles: v.event_subtitles.map(|s| tape.value(s).clone()),
            segmentation: v.segmentation.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct QueryEncoding {
    pub tokens: Matrix,
    pub q_f: Vec<f64>,
    pub q_s: Option<Vec<f64>>,
}

/// Coordinatewise maximum of the rows in `span`.
pub fn pool_event(frames: &Matrix, span: EventSpan) -> Vec<f64> {
    let mut out = frames.row(span.start).to_vec();
    for r in span.start + 1..span.end {
        for (o, &v) in out.iter_mut().zip(frames.row(r)) {
            *o = o.max(v);
        }
    }
    out
}

/// Largest cosine between `q` and any row of `m`.
pub fn max_cosine(q: &[f64], m: &Matrix) -> f64 {
    (0..m.rows())
        .map(|r| cosine(q, m.row(r), COSINE_EPS))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Mean of the best query-event and query-subtitle cosines; the event term alone
/// without subtitles.
pub fn video_retrieval_score(q: &QueryEncoding, v: &VideoEncoding) -> f64 {
    let e = max_cosine(&q.q_f, &v.events);
    match (&q.q_s, &v.event_subtitles) {
        (Some(qs), Some(s)) => 0.5 * (e + max_cosine(qs, s)),
        _ => e,
    }
}

#[derive(Clone, Debug)]
pub struct Retriever {
    pub config: ModelConfig,
    pub video: VideoEncoder,
    pub query: QueryEncoder,
}

impl Retriever {
    /// Builds the model and draws fresh parameters from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParameterSet)> {
        config.validate()?;
        let mut params = ParameterSet::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = VideoEncoder::init(&mut params, &mut rng, "ret.video", &config, false)?;
        let query = QueryEncoder::init(&mut params, &mut rng, "ret.query", &config, true)?;
        Ok((Self { config, video, query }, params))
    }

    /// Rebuilds the layer handles for `params` loaded from a checkpoint.
    pub fn for_params(config: ModelConfig, params: &ParameterSet) -> Result<Self> {
        let (model, fresh) = Self::init(config, params.seed())?;
        check_layout(&fresh, params)?;
        Ok(model)
    }

    pub fn encode_video(&self, params: &ParameterSet, video: &VideoRecord) -> Result<VideoEncoding> {
        let mut tape = Tape::new();
        let v = self.video.forward(&mut tape, params, video, None)?;
        Ok(VideoEncoding::from_vars(&tape, &v))
    }

    pub fn encode_query(&self, params: &ParameterSet, tokens: &Matrix) -> Result<QueryEncoding> {
        let mut tape = Tape::new();
        let q = self.query.forward(&mut tape, params, tokens)?;
        let row = |v: Option<crate::diff::Var>| v.map(|v| tape.value(v).row(0).to_vec());
        Ok(QueryEncoding {
            tokens: tape.value(q.tokens).clone(),
            q_f: row(q.q_f).expect("retriever query encoder pools"),
            q_s: row(q.q_s),
        })
    }

    pub fn encode_corpus(
        &self,
        params: &ParameterSet,
        corpus: &FeatureCorpus,
        exec: Execution,
    ) -> Result<Vec<VideoEncoding>> {
        parallel::map(exec, corpus.videos(), |v| self.encode_video(params, v))
            .into_iter()
            .collect()
    }
}

/// Names and shapes of `loaded` must match a fresh initialization.
pub(crate) fn check_layout(fresh: &ParameterSet, loaded: &ParameterSet) -> Result<()> {
    if fresh.len() != loaded.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} tensors", fresh.len()),
            loaded.len(),
        ));
    }
    for ((a, ma), (b, mb)) in fresh.iter().zip(loaded.iter()) {
        if a != b || ma.shape() != mb.shape() {
            return Err(Error::format(
                "checkpoint",
                format!("{a} {:?}", ma.shape()),
                format!("{b} {:?}", mb.shape()),
            ));
        }
    }
    Ok(())
}
