//! Retrieval efficiency: steady-state top-10 latency, stored-vector counts and
//! memory accounting of a [`CorpusIndex`].

use std::time::Instant;

use serde::Serialize;

use crate::corpus::{FeatureCorpus, QueryRecord};
use crate::diff::ParameterSet;
use crate::error::{Error, Result};
use crate::localizer::Localizer;
use crate::parallel::Execution;
use crate::retriever::{CorpusIndex, IndexMode, QueryEncoding};

const WARMUP: usize = 5;
const BENCH_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub mode: IndexMode,
    pub videos: usize,
    pub dim: usize,
    pub mean_latency_ms: f64,
    pub visual_vectors: usize,
    pub subtitle_vectors: usize,
    pub vector_count: usize,
    pub memory_bytes: usize,
    pub localization_latency_ms: Option<f64>,
}

/// Mean wall-clock time of `retrieve(K = 10)` over `repetitions` passes through
/// `queries`, after at least five warmup queries.
pub fn bench_retrieval(
    index: &CorpusIndex,
    queries: &[QueryEncoding],
    repetitions: usize,
    exec: Execution,
) -> Result<BenchReport> {
    if queries.is_empty() || repetitions == 0 {
        return Err(Error::Argument("benchmark needs queries and repetitions >= 1".into()));
    }
    for i in 0..WARMUP.max(queries.len()) {
        std::hint::black_box(index.retrieve(&queries[i % queries.len()], BENCH_K, exec)?);
    }
    let start = Instant::now();
    for _ in 0..repetitions {
        for q in queries {
            std::hint::black_box(index.retrieve(q, BENCH_K, exec)?);
        }
    }
    let calls = (repetitions * queries.len()) as f64;
    Ok(BenchReport {
        mode: index.mode(),
        videos: index.len(),
        dim: index.dim(),
        mean_latency_ms: start.elapsed().as_secs_f64() * 1e3 / calls,
        visual_vectors: index.visual_vectors(),
        subtitle_vectors: index.subtitle_vectors(),
        vector_count: index.vector_count(),
        memory_bytes: index.memory_bytes(),
        localization_latency_ms: None,
    })
}

/// Mean time to compute one query's confidence profile in its own video.
pub fn bench_localization(
    localizer: (&Localizer, &ParameterSet),
    corpus: &FeatureCorpus,
    queries: &[&QueryRecord],
    repetitions: usize,
) -> Result<f64> {
    if queries.is_empty() || repetitions == 0 {
        return Err(Error::Argument("benchmark needs queries and repetitions >= 1".into()));
    }
    let run = |q: &QueryRecord| -> Result<()> {
        let video = corpus
            .video(&q.video_id)
            .ok_or_else(|| Error::Argument(format!("unknown video {}", q.video_id)))?;
        std::hint::black_box(localizer.0.profile(localizer.1, video, &q.token_features.to_matrix())?);
        Ok(())
    };
    for i in 0..WARMUP {
        run(queries[i % queries.len()])?;
    }
    let start = Instant::now();
    for _ in 0..repetitions {
        for q in queries {
            run(q)?;
        }
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / (repetitions * queries.len()) as f64)
}
