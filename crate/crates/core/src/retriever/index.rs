//! Scan-based corpus index over unit-normalized `f32` vectors.
//!
//! Event mode stores Ê and Ŝ per video, frame mode stores F̄ and S̄. Retrieval
//! scores every video with the max-cosine rule of the retriever.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QueryEncoding, VideoEncoding, COSINE_EPS};
use crate::corpus::codec::{self, FeatureMatrix};
use crate::diff::Matrix;
use crate::error::{Error, Result};
use crate::events::EventSpan;
use crate::parallel::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    Event,
    Frame,
}

impl std::str::FromStr for IndexMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "event" => Ok(IndexMode::Event),
            "frame" => Ok(IndexMode::Frame),
            other => Err(format!("unknown index mode `{other}` (event | frame)")),
        }
    }
}

/// Contiguous row-major store of normalized vectors with per-video row ranges.
#[derive(Clone, Debug, Default)]
struct Block {
    data: Vec<f32>,
    ranges: Vec<(usize, usize)>,
}

impl Block {
    fn push(&mut self, m: &Matrix) {
        let start = self.data.len() / m.cols().max(1);
        for r in 0..m.rows() {
            let row = m.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS);
            self.data.extend(row.iter().map(|v| (v / n) as f32));
        }
        self.ranges.push((start, start + m.rows()));
    }

    fn rows(&self, dim: usize) -> usize {
        self.data.len() / dim
    }

    fn max_dot(&self, video: usize, q: &[f64]) -> f64 {
        let (s, e) = self.ranges[video];
        let d = q.len();
        (s..e)
            .map(|r| {
                self.data[r * d..(r + 1) * d]
                    .iter()
                    .zip(q)
                    .map(|(&a, b)| a as f64 * b)
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn matrix(&self, video: usize, dim: usize) -> FeatureMatrix {
        let (s, e) = self.ranges[video];
        FeatureMatrix::new(e - s, dim, self.data[s * dim..e * dim].to_vec()).expect("block slice")
    }
}

#[derive(Clone, Debug)]
pub struct CorpusIndex {
    mode: IndexMode,
    dim: usize,
    video_ids: Vec<String>,
    spans: Vec<Vec<EventSpan>>,
    visual: Block,
    subtitles: Option<Block>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    v.iter().map(|x| x / n).collect()
}

pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const INDEX_META_FILE: &str = "index.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentLine {
    video_id: String,
    spans: Vec<[usize; 2]>,
    visual_file: String,
    subtitle_file: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexMeta {
    mode: IndexMode,
    dim: usize,
    videos: usize,
}

fn read_block(dir: &Path, files: &[&str], dim: usize) -> Result<Block> {
    let mut block = Block::default();
    for f in files {
        let path = dir.join(f);
        let m = codec::read_features(&path)?;
        if m.cols() != dim {
            return Err(Error::format(path.display().to_string(), format!("{dim} columns"), m.cols()));
        }
        let start = block.data.len() / dim.max(1);
        block.data.extend_from_slice(m.data());
        block.ranges.push((start, start + m.rows()));
    }
    Ok(block)
}

impl CorpusIndex {
    pub fn build(mode: IndexMode, video_ids: &[String], encodings: &[VideoEncoding]) -> Result<Self> {
        if video_ids.len() != encodings.len() {
            return Err(Error::shape(
                "CorpusIndex::build",
                format!("{} ids for {} encodings", video_ids.len(), encodings.len()),
            ));
        }
        let first = encodings.first();
        let dim = first.map_or(0, |e| e.frames.cols());
        let with_subs = first.is_some_and(|e| e.subtitles.is_some());
        let mut visual = Block::default();
        let mut subtitles = with_subs.then(Block::default);
        for e in encodings {
            let (v, s) = match mode {
                IndexMode::Event => (&e.events, e.event_subtitles.as_ref()),
                IndexMode::Frame => (&e.frames, e.subtitles.as_ref()),
            };
            if v.cols() != dim {
                return Err(Error::shape("CorpusIndex::build", "encoding widths differ"));
            }
            visual.push(v);
            match (&mut subtitles, s) {
                (Some(block), Some(s)) => block.push(s),
                (None, None) => {}
                _ => return Err(Error::shape("CorpusIndex::build", "subtitle presence differs")),
            }
        }
        Ok(Self {
            mode,
            dim,
            video_ids: video_ids.to_vec(),
            spans: encodings.iter().map(|e| e.segmentation.spans().to_vec()).collect(),
            visual,
            subtitles,
        })
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.video_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video_ids.is_empty()
    }

    pub fn video_ids(&self) -> &[String] {
        &self.video_ids
    }

    pub fn visual_vectors(&self) -> usize {
        self.visual.rows(self.dim.max(1))
    }

    pub fn subtitle_vectors(&self) -> usize {
        self.subtitles.as_ref().map_or(0, |b| b.rows(self.dim.max(1)))
    }

    pub fn vector_count(&self) -> usize {
        self.visual_vectors() + self.subtitle_vectors()
    }

    pub fn memory_bytes(&self) -> usize {
        self.vector_count() * self.dim * 4
    }

    /// Score of video `v` for `q`.
    pub fn score(&self, q: &QueryEncoding, v: usize) -> f64 {
        self.score_unit(&unit(&q.q_f), q.q_s.as_deref().map(unit).as_deref(), v)
    }

    fn score_unit(&self, qf: &[f64], qs: Option<&[f64]>, v: usize) -> f64 {
        let e = self.visual.max_dot(v, qf);
        match (qs, &self.subtitles) {
            (Some(qs), Some(b)) => 0.5 * (e + b.max_dot(v, qs)),
            _ => e,
        }
    }

    /// Top-`k` videos as `(index, score)`, by score descending then video id.
    pub fn retrieve(&self, q: &QueryEncoding, k: usize, exec: Execution) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(Error::Argument("cannot retrieve from an empty corpus".into()));
        }
        if q.q_f.len() != self.dim {
            return Err(Error::shape(
                "retrieve",
                format!("query width {} vs index width {}", q.q_f.len(), self.dim),
            ));
        }
        let qf = unit(&q.q_f);
        let qs = q.q_s.as_deref().map(unit);
        let mut scored: Vec<(usize, f64)> =
            parallel::map_range(exec, self.len(), |v| (v, self.score_unit(&qf, qs.as_deref(), v)));
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.video_ids[a.0].cmp(&self.video_ids[b.0]))
        });
        scored.truncate(k);
        Ok(scored)
    }

    /// Writes per-video `.evtf` matrices and `segments.jsonl` under `dir`.
    /// Returns the total payload bytes written (headers excluded).
    pub fn dump(&self, dir: &Path) -> Result<usize> {
        fs::create_dir_all(dir).map_err(|e| Error::ingest(dir, e))?;
        let mut lines = String::new();
        let mut payload = 0;
        for (i, id) in self.video_ids.iter().enumerate() {
            let visual_file = format!("v{i:06}.visual.evtf");
            let m = self.visual.matrix(i, self.dim);
            payload += m.rows() * m.cols() * 4;
            codec::write_features(&m, &dir.join(&visual_file))?;
            let subtitle_file = match &self.subtitles {
                Some(b) => {
                    let f = format!("v{i:06}.subtitle.evtf");
                    let m = b.matrix(i, self.dim);
                    payload += m.rows() * m.cols() * 4;
                    codec::write_features(&m, &dir.join(&f))?;
                    Some(f)
                }
                None => None,
            };
            let line = SegmentLine {
                video_id: id.clone(),
                spans: self.spans[i].iter().map(|s| [s.start, s.end]).collect(),
                visual_file,
                subtitle_file,
            };
            lines.push_str(&serde_json::to_string(&line).expect("segment line serializes"));
            lines.push('\n');
        }
        let path = dir.join(SEGMENTS_FILE);
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(lines.as_bytes()))
            .map_err(|e| Error::ingest(&path, e))?;
        let meta = IndexMeta {
            mode: self.mode,
            dim: self.dim,
            videos: self.len(),
        };
        let path = dir.join(INDEX_META_FILE);
        fs::write(&path, serde_json::to_string(&meta).expect("index meta serializes"))
            .map_err(|e| Error::ingest(&path, e))?;
        Ok(payload)
    }

    /// Reads an index written by [`CorpusIndex::dump`]. Stored rows are already
    /// unit-normalized `f32`, so the loaded index scores identically.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::ingest(&path, e))?;
        let meta: IndexMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), "index metadata", e))?;
        let path = dir.join(SEGMENTS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::ingest(&path, e))?;
        let lines: Vec<SegmentLine> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::format(format!("{}:{}", path.display(), n + 1), "segment record", e))
            })
            .collect::<Result<_>>()?;
        if lines.len() != meta.videos {
            return Err(Error::format(
                path.display().to_string(),
                format!("{} videos", meta.videos),
                lines.len(),
            ));
        }
        let visual = read_block(dir, &lines.iter().map(|l| l.visual_file.as_str()).collect::<Vec<_>>(), meta.dim)?;
        let sub_files: Option<Vec<&str>> = lines.iter().map(|l| l.subtitle_file.as_deref()).collect();
        let subtitles = match sub_files {
            Some(files) if !files.is_empty() => Some(read_block(dir, &files, meta.dim)?),
            _ if lines.iter().any(|l| l.subtitle_file.is_some()) => {
                return Err(Error::format(path.display().to_string(), "subtitle files for every video", "some missing"))
            }
            _ => None,
        };
        Ok(Self {
            mode: meta.mode,
            dim: meta.dim,
            video_ids: lines.iter().map(|l| l.video_id.clone()).collect(),
            spans: lines
                .iter()
                .map(|l| l.spans.iter().map(|&[start, end]| EventSpan { start, end }).collect())
                .collect(),
            visual,
            subtitles,
        })
    }
}
