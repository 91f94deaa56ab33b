//! Feature corpora: records, validation, the on-disk manifest layout and a
//! synthetic generator.
//!
//! On disk a corpus is a directory holding `videos.jsonl`, `queries.jsonl` and
//! the binary feature files they reference (paths relative to the directory).

pub mod codec;
mod manifest;
mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use codec::{read_features, write_features, FeatureMatrix};
pub use manifest::{load_corpus, load_corpus_files, write_corpus, QUERIES_FILE, VIDEOS_FILE};
pub use synth::{block_spans, synthesize_corpus, SynthConfig};

use crate::error::{Error, Result};

pub const DEFAULT_FRAME_DURATION_S: f64 = 1.5;

/// Half-open frame span `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Moment {
    pub start: usize,
    pub end: usize,
}

impl Moment {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Inclusive `(first, last)` frame indices.
    pub fn inclusive(&self) -> (usize, usize) {
        (self.start, self.end - 1)
    }

    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.end
    }
}

impl From<[usize; 2]> for Moment {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Moment> for [usize; 2] {
    fn from(m: Moment) -> Self {
        [m.start, m.end]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split `{other}` (train | val)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub frame_features: FeatureMatrix,
    /// Same row count as `frame_features`; a time step without subtitle is an all-zero row.
    pub subtitle_features: Option<FeatureMatrix>,
    pub frame_duration_s: f64,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.frame_features.rows()
    }

    pub fn has_subtitle_at(&self, t: usize) -> bool {
        self.subtitle_features
            .as_ref()
            .is_some_and(|s| s.row(t).iter().any(|&v| v != 0.0))
    }

    /// Bitwise equality of every field.
    pub fn bits_eq(&self, other: &VideoRecord) -> bool {
        self.video_id == other.video_id
            && self.frame_features.bits_eq(&other.frame_features)
            && match (&self.subtitle_features, &other.subtitle_features) {
                (Some(a), Some(b)) => a.bits_eq(b),
                (None, None) => true,
                _ => false,
            }
            && self.frame_duration_s.to_bits() == other.frame_duration_s.to_bits()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub query_id: String,
    pub video_id: String,
    pub token_features: FeatureMatrix,
    pub moment: Moment,
    pub split: Split,
}

impl QueryRecord {
    pub fn bits_eq(&self, other: &QueryRecord) -> bool {
        self.query_id == other.query_id
            && self.video_id == other.video_id
            && self.token_features.bits_eq(&other.token_features)
            && self.moment == other.moment
            && self.split == other.split
    }
}

/// Validated, immutable collection of videos and queries.
#[derive(Clone, Debug)]
pub struct FeatureCorpus {
    videos: Vec<VideoRecord>,
    queries: Vec<QueryRecord>,
    by_id: HashMap<String, usize>,
}

impl FeatureCorpus {
    /// Validates every record invariant and builds the id lookup.
    pub fn new(videos: Vec<VideoRecord>, queries: Vec<QueryRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(videos.len());
        let first = videos.first();
        let frame_dim = first.map(|v| v.frame_features.cols());
        let sub_dim = first.map(|v| v.subtitle_features.as_ref().map(FeatureMatrix::cols));
        for (i, v) in videos.iter().enumerate() {
            let id = &v.video_id;
            if v.num_frames() == 0 {
                return Err(Error::validation(id, "num_frames >= 1"));
            }
            if !v.frame_features.is_finite() {
                return Err(Error::validation(id, "frame features finite"));
            }
            if Some(v.frame_features.cols()) != frame_dim {
                return Err(Error::validation(id, "frame feature width consistent across corpus"));
            }
            if !(v.frame_duration_s.is_finite() && v.frame_duration_s > 0.0) {
                return Err(Error::validation(id, "frame_duration_s > 0"));
            }
            match (&v.subtitle_features, sub_dim.flatten()) {
                (Some(s), Some(d)) => {
                    if s.rows() != v.num_frames() {
                        return Err(Error::validation(id, "subtitle rows equal num_frames"));
                    }
                    if s.cols() != d {
                        return Err(Error::validation(
                            id,
                            "subtitle feature width consistent across corpus",
                        ));
                    }
                    if !s.is_finite() {
                        return Err(Error::validation(id, "subtitle features finite"));
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(Error::validation(
                        id,
                        "subtitle presence consistent across corpus",
                    ))
                }
            }
            if by_id.insert(id.clone(), i).is_some() {
                return Err(Error::validation(id, "video_id unique"));
            }
        }
        let query_dim = queries.first().map(|q| q.token_features.cols());
        let mut query_ids = std::collections::HashSet::with_capacity(queries.len());
        for q in &queries {
            let id = &q.query_id;
            if !query_ids.insert(id.as_str()) {
                return Err(Error::validation(id, "query_id unique"));
            }
            let Some(&vi) = by_id.get(&q.video_id) else {
                return Err(Error::validation(id, "video_id resolves to a corpus video"));
            };
            if q.token_features.rows() == 0 {
                return Err(Error::validation(id, "query has at least one token"));
            }
            if !q.token_features.is_finite() {
                return Err(Error::validation(id, "token features finite"));
            }
            if Some(q.token_features.cols()) != query_dim {
                return Err(Error::validation(id, "token feature width consistent across corpus"));
            }
            let t = videos[vi].num_frames();
            if !(q.moment.start < q.moment.end && q.moment.end <= t) {
                return Err(Error::validation(
                    id,
                    format!("moment [{}, {}) inside [0, {t})", q.moment.start, q.moment.end),
                ));
            }
        }
        Ok(Self {
            videos,
            queries,
            by_id,
        })
    }

    pub fn videos(&self) -> &[VideoRecord] {
        &self.videos
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.queries
    }

    pub fn video_index(&self, video_id: &str) -> Option<usize> {
        self.by_id.get(video_id).copied()
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoRecord> {
        self.video_index(video_id).map(|i| &self.videos[i])
    }

    /// Indices of the queries in `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.queries
            .iter()
            .enumerate()
            .filter(|(_, q)| q.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_subtitles(&self) -> bool {
        self.videos
            .first()
            .is_some_and(|v| v.subtitle_features.is_some())
    }

    pub fn frame_dim(&self) -> usize {
        self.videos.first().map_or(0, |v| v.frame_features.cols())
    }

    pub fn subtitle_dim(&self) -> Option<usize> {
        self.videos
            .first()
            .and_then(|v| v.subtitle_features.as_ref().map(FeatureMatrix::cols))
    }

    pub fn query_dim(&self) -> usize {
        self.queries.first().map_or(0, |q| q.token_features.cols())
    }

    pub fn max_frames(&self) -> usize {
        self.videos.iter().map(VideoRecord::num_frames).max().unwrap_or(0)
    }

    pub fn max_query_len(&self) -> usize {
        self.queries
            .iter()
            .map(|q| q.token_features.rows())
            .max()
            .unwrap_or(0)
    }

    /// Field-by-field bitwise equality.
    pub fn bits_eq(&self, other: &FeatureCorpus) -> bool {
        self.videos.len() == other.videos.len()
            && self.queries.len() == other.queries.len()
            && self.videos.iter().zip(&other.videos).all(|(a, b)| a.bits_eq(b))
            && self.queries.iter().zip(&other.queries).all(|(a, b)| a.bits_eq(b))
    }
}
