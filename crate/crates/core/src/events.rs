//! Event reasoning: partition a frame sequence into contiguous events.
//!
//! Three strategies are available. Contrastive convolution slides a 5×5
//! quadrant kernel along the diagonal of the temporal self-similarity matrix
//! (TSM) and cuts at score peaks; K-means clusters TSM columns augmented with
//! the frame index and cuts wherever the label changes; the fixed window
//! cuts every `w` frames.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{codec, FeatureMatrix};
use crate::diff::tensor::{dot, norm, Matrix};
use crate::error::{Error, Result};

const COSINE_EPS: f64 = 1e-8;
const KMEANS_MAX_ITERS: usize = 100;
/// Half width of the contrastive kernel (5×5).
const KERNEL_RADIUS: isize = 2;

/// Symmetric `T × T` matrix of frame cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct Tsm(Matrix);

impl Tsm {
    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Entry with zero padding outside the matrix.
    fn padded(&self, i: isize, j: isize) -> f64 {
        let n = self.size() as isize;
        if i < 0 || j < 0 || i >= n || j >= n {
            0.0
        } else {
            self.0.get(i as usize, j as usize)
        }
    }
}

/// Cosine self-similarity of the rows of `frames`, denominators floored at 1e-8.
/// The diagonal is exactly 1 (also for all-zero rows).
pub fn build_tsm(frames: &Matrix) -> Result<Tsm> {
    let t = frames.rows();
    if t == 0 {
        return Err(Error::Argument("cannot build a TSM of zero frames".into()));
    }
    if !frames.is_finite() {
        return Err(Error::Numeric("frame representations are not finite".into()));
    }
    let norms: Vec<f64> = (0..t).map(|i| norm(frames.row(i))).collect();
    let mut m = Matrix::zeros(t, t);
    for i in 0..t {
        m.set(i, i, 1.0);
        for j in i + 1..t {
            let c = dot(frames.row(i), frames.row(j)) / (norms[i] * norms[j]).max(COSINE_EPS);
            m.set(i, j, c);
            m.set(j, i, c);
        }
    }
    Ok(Tsm(m))
}

/// Weight of the contrastive kernel at offset `(a, b)` from its center: +1 on the
/// two same-side 2×2 quadrants, −1 on the cross quadrants, 0 on the center row
/// and column.
pub fn kernel_weight(a: isize, b: isize) -> f64 {
    (a.signum() * b.signum()) as f64
}

/// Diagonal convolution of the TSM with the contrastive kernel (zero padded).
pub fn boundary_scores(tsm: &Tsm) -> Vec<f64> {
    let n = tsm.size() as isize;
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for a in -KERNEL_RADIUS..=KERNEL_RADIUS {
                for b in -KERNEL_RADIUS..=KERNEL_RADIUS {
                    let w = kernel_weight(a, b);
                    if w != 0.0 {
                        s += w * tsm.padded(i + a, i + b);
                    }
                }
            }
            s
        })
        .collect()
}

/// Boundary frames from contrastive scores.
///
/// Frame `i` is a boundary when its score exceeds the mean score by more than
/// `delta` and it is a peak: no lower than its left neighbour and strictly higher
/// than its right one. A clean cut between frames `b − 1` and `b` scores the two
/// frames identically, so the plateau resolves to `b`, the first frame of the new
/// event. The last frame is never a candidate: under zero padding its window has
/// no cross-quadrant term, so its score carries no contrast.
pub fn peak_boundaries(scores: &[f64], delta: f64) -> Vec<usize> {
    let t = scores.len();
    if t < 3 {
        return Vec::new();
    }
    let mean = scores.iter().sum::<f64>() / t as f64;
    let tol = |v: f64| 1e-9 * v.abs().max(1.0);
    (1..t - 1)
        .filter(|&i| {
            let s = scores[i];
            s - mean > delta && s >= scores[i - 1] - tol(s) && s > scores[i + 1] + tol(s)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum Strategy {
    Convolution { delta: f64 },
    Kmeans { k: usize, beta: f64 },
    Window { w: usize },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::Convolution { delta: 0.3 }
    }
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Convolution { .. } => "convolution",
            Strategy::Kmeans { .. } => "kmeans",
            Strategy::Window { .. } => "window",
        }
    }
}

/// Half-open frame range of one event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpan {
    pub start: usize,
    pub end: usize,
}

impl EventSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.end
    }

    /// Midpoint of the covered frame indices.
    pub fn center(&self) -> f64 {
        (self.start + self.end - 1) as f64 / 2.0
    }
}

/// Contiguous, non-overlapping spans covering `[0, T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSegmentation {
    spans: Vec<EventSpan>,
    strategy: Strategy,
}

impl EventSegmentation {
    /// Cuts `[0, frames)` immediately before each boundary frame. Boundaries must
    /// be strictly increasing and inside `1..frames`.
    pub fn from_boundaries(frames: usize, boundaries: &[usize], strategy: Strategy) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Argument("segmentation of zero frames".into()));
        }
        let mut spans = Vec::with_capacity(boundaries.len() + 1);
        let mut start = 0;
        for &b in boundaries {
            if b <= start || b >= frames {
                return Err(Error::Argument(format!(
                    "boundary {b} out of order or outside 1..{frames}"
                )));
            }
            spans.push(EventSpan { start, end: b });
            start = b;
        }
        spans.push(EventSpan { start, end: frames });
        Ok(Self { spans, strategy })
    }

    /// Rebuilds from stored spans, checking the partition invariant.
    pub fn from_spans(spans: Vec<EventSpan>, strategy: Strategy) -> Result<Self> {
        let seg = Self { spans, strategy };
        seg.check_partition()?;
        Ok(seg)
    }

    pub fn spans(&self) -> &[EventSpan] {
        &self.spans
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.spans.last().map_or(0, |s| s.end)
    }

    /// Index of the event containing `frame`.
    pub fn event_of(&self, frame: usize) -> Option<usize> {
        if frame >= self.num_frames() {
            return None;
        }
        Some(self.spans.partition_point(|s| s.end <= frame))
    }

    pub fn as_pairs(&self) -> Vec<(usize, usize)> {
        self.spans.iter().map(|s| (s.start, s.end)).collect()
    }

    pub fn check_partition(&self) -> Result<()> {
        let bad = |rule: &str| Err(Error::validation("segmentation", rule));
        let Some(first) = self.spans.first() else {
            return bad("at least one span");
        };
        if first.start != 0 {
            return bad("first span starts at 0");
        }
        for s in &self.spans {
            if s.start >= s.end {
                return bad("spans non-empty");
            }
        }
        for w in self.spans.windows(2) {
            if w[0].end != w[1].start {
                return bad("spans contiguous");
            }
        }
        Ok(())
    }
}

pub fn boundaries_convolution(tsm: &Tsm, delta: f64) -> Result<EventSegmentation> {
    if !(delta >= 0.0) {
        return Err(Error::Argument(format!("delta {delta} must be >= 0")));
    }
    let scores = boundary_scores(tsm);
    let cuts = peak_boundaries(&scores, delta);
    EventSegmentation::from_boundaries(tsm.size(), &cuts, Strategy::Convolution { delta })
}

/// K-means labels of the TSM-column features; exposed for diagnostics.
pub fn kmeans_labels(tsm: &Tsm, k: usize, beta: f64) -> Result<Vec<usize>> {
    let t = tsm.size();
    if k == 0 || k > t {
        return Err(Error::Argument(format!("k = {k} must be in 1..={t}")));
    }
    if !beta.is_finite() {
        return Err(Error::Argument(format!("beta {beta} must be finite")));
    }
    let dim = t + 1;
    let features: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let mut f: Vec<f64> = (0..t).map(|r| tsm.get(r, i)).collect();
            f.push(beta * i as f64 / t as f64);
            f
        })
        .collect();
    let mut centers: Vec<Vec<f64>> = (0..k).map(|j| features[j * t / k].clone()).collect();
    let mut labels = vec![usize::MAX; t];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d: f64 = f.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &l) in features.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(f) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Ok(labels)
}

pub fn boundaries_kmeans(tsm: &Tsm, k: usize, beta: f64) -> Result<EventSegmentation> {
    let labels = kmeans_labels(tsm, k, beta)?;
    let cuts: Vec<usize> = (1..labels.len())
        .filter(|&i| labels[i] != labels[i - 1])
        .collect();
    EventSegmentation::from_boundaries(tsm.size(), &cuts, Strategy::Kmeans { k, beta })
}

pub fn boundaries_window(frames: usize, w: usize) -> Result<EventSegmentation> {
    if w == 0 {
        return Err(Error::Argument("window size must be >= 1".into()));
    }
    let cuts: Vec<usize> = (1..)
        .map(|j| j * w)
        .take_while(|&b| b < frames)
        .collect();
    EventSegmentation::from_boundaries(frames, &cuts, Strategy::Window { w })
}

/// Runs `strategy` on frame representations.
pub fn segment(frames: &Matrix, strategy: Strategy) -> Result<EventSegmentation> {
    match strategy {
        Strategy::Window { w } => boundaries_window(frames.rows(), w),
        Strategy::Convolution { delta } => boundaries_convolution(&build_tsm(frames)?, delta),
        Strategy::Kmeans { k, beta } => {
            // A short video cannot host more clusters than frames.
            boundaries_kmeans(&build_tsm(frames)?, k.min(frames.rows()), beta)
        }
    }
}

/// Writes `tsm.evtf` (`T × T`) and `scores.evtf` (`1 × T`) under `dir`.
pub fn dump_debug(tsm: &Tsm, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::ingest(dir, e))?;
    codec::write_features(&FeatureMatrix::from_matrix(tsm.matrix()), &dir.join("tsm.evtf"))?;
    let scores = Matrix::row_vector(&boundary_scores(tsm));
    codec::write_features(&FeatureMatrix::from_matrix(&scores), &dir.join("scores.evtf"))
}
