use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::codec::FeatureMatrix;
use super::{FeatureCorpus, Moment, QueryRecord, Split, VideoRecord, DEFAULT_FRAME_DURATION_S};
use crate::error::{Error, Result};

/// Parameters of the block-structured synthetic corpus.
///
/// Every video is `events_per_video` contiguous blocks of near-equal length. Block
/// prototypes within a video are mutually orthogonal with norm `√dim`; each frame is
/// its block's prototype plus i.i.d. Gaussian noise of standard deviation `noise`.
/// A query's tokens are noisy copies of one block's prototype and its moment is
/// exactly that block's span.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub videos: usize,
    pub frames: usize,
    pub dim: usize,
    pub events_per_video: usize,
    pub queries_per_video: usize,
    pub noise: f64,
    pub query_len: usize,
    /// Adds subtitle features: roughly half the frames carry a noisy copy of a
    /// per-block text prototype, the rest are zero rows.
    pub subtitles: bool,
    /// Extra queries per video tagged with the validation split.
    pub val_queries_per_video: usize,
}

impl SynthConfig {
    pub fn new(
        seed: u64,
        videos: usize,
        frames: usize,
        dim: usize,
        events_per_video: usize,
        queries_per_video: usize,
    ) -> Self {
        Self {
            seed,
            videos,
            frames,
            dim,
            events_per_video,
            queries_per_video,
            noise: 0.1,
            query_len: 4,
            subtitles: false,
            val_queries_per_video: 0,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_subtitles(mut self, on: bool) -> Self {
        self.subtitles = on;
        self
    }

    pub fn with_query_len(mut self, len: usize) -> Self {
        self.query_len = len;
        self
    }

    pub fn with_val_queries(mut self, n: usize) -> Self {
        self.val_queries_per_video = n;
        self
    }
}

/// Block `j` of `events` over `frames` covers `[⌊j·T/E⌋, ⌊(j+1)·T/E⌋)`.
pub fn block_spans(frames: usize, events: usize) -> Vec<Moment> {
    (0..events)
        .map(|j| Moment::new(j * frames / events, (j + 1) * frames / events))
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// `count` mutually orthogonal vectors of norm `√dim` (Gram–Schmidt on Gaussians).
fn orthogonal_prototypes(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let scale = (dim as f64).sqrt();
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * scale).collect())
        .collect()
}

fn noisy_rows(
    rng: &mut ChaCha8Rng,
    proto: &[f64],
    count: usize,
    noise: &Option<Normal<f64>>,
) -> Vec<Vec<f32>> {
    (0..count)
        .map(|_| {
            proto
                .iter()
                .map(|&p| {
                    let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                    (p + n) as f32
                })
                .collect()
        })
        .collect()
}

pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<FeatureCorpus> {
    if cfg.videos == 0 || cfg.frames == 0 || cfg.dim == 0 || cfg.query_len == 0 {
        return Err(Error::Argument(
            "videos, frames, dim and query_len must be positive".into(),
        ));
    }
    if cfg.events_per_video == 0 || cfg.events_per_video > cfg.frames {
        return Err(Error::Argument(format!(
            "events_per_video {} must be in 1..={}",
            cfg.events_per_video, cfg.frames
        )));
    }
    if cfg.events_per_video > cfg.dim {
        return Err(Error::Argument(format!(
            "{} orthogonal block prototypes do not fit in dimension {}",
            cfg.events_per_video, cfg.dim
        )));
    }
    if !(cfg.noise.is_finite() && cfg.noise >= 0.0) {
        return Err(Error::Argument(format!("noise {} must be >= 0", cfg.noise)));
    }
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("valid sigma"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spans = block_spans(cfg.frames, cfg.events_per_video);
    let mut videos = Vec::with_capacity(cfg.videos);
    let mut queries = Vec::new();

    for vi in 0..cfg.videos {
        let video_id = format!("v{vi:05}");
        let protos = orthogonal_prototypes(&mut rng, cfg.events_per_video, cfg.dim);
        let mut rows = Vec::with_capacity(cfg.frames);
        for (b, span) in spans.iter().enumerate() {
            rows.extend(noisy_rows(&mut rng, &protos[b], span.len(), &noise));
        }
        let subtitle_features = if cfg.subtitles {
            let text = orthogonal_prototypes(&mut rng, cfg.events_per_video, cfg.dim);
            let mut srows = Vec::with_capacity(cfg.frames);
            for (b, span) in spans.iter().enumerate() {
                for _ in span.start..span.end {
                    if rng.random_bool(0.5) {
                        srows.extend(noisy_rows(&mut rng, &text[b], 1, &noise));
                    } else {
                        srows.push(vec![0.0; cfg.dim]);
                    }
                }
            }
            Some(FeatureMatrix::from_rows(&srows)?)
        } else {
            None
        };
        videos.push(VideoRecord {
            video_id: video_id.clone(),
            frame_features: FeatureMatrix::from_rows(&rows)?,
            subtitle_features,
            frame_duration_s: DEFAULT_FRAME_DURATION_S,
        });

        let total = cfg.queries_per_video + cfg.val_queries_per_video;
        for qi in 0..total {
            let block = qi % cfg.events_per_video;
            let tokens = noisy_rows(&mut rng, &protos[block], cfg.query_len, &noise);
            queries.push(QueryRecord {
                query_id: format!("{video_id}_q{qi:02}"),
                video_id: video_id.clone(),
                token_features: FeatureMatrix::from_rows(&tokens)?,
                moment: spans[block],
                split: if qi < cfg.queries_per_video {
                    Split::Train
                } else {
                    Split::Val
                },
            });
        }
    }
    FeatureCorpus::new(videos, queries)
}
