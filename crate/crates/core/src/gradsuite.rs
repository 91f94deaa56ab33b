//! Finite-difference verification of every training loss on a small model.

use std::time::Instant;

use serde::Serialize;

use crate::corpus::{synthesize_corpus, SynthConfig};
use crate::corpus::FeatureCorpus;
use crate::diff::nn::AnchorSize;
use crate::diff::gradcheck::gradient_check_with;
use crate::diff::{Gradients, Matrix, ParameterSet, Tape, Var};
use crate::error::Result;
use crate::events::Strategy;
use crate::localizer::{Localizer, LocalizerLoss, LocalizerWeights};
use crate::parallel::Execution;
use crate::retriever::{ModelConfig, Retriever};
use crate::training::{batch_loss, nce, BatchLoss, LossWeights};

pub const GRADIENT_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-4;
pub const SUITE_SEED: u64 = 19;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientResult {
    pub loss: String,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub seconds: f64,
}

impl GradientResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADIENT_TOLERANCE
    }
}

/// Corpus and model configuration the suite runs on.
pub fn suite_setup(seed: u64) -> Result<(FeatureCorpus, ModelConfig)> {
    let corpus = synthesize_corpus(
        &SynthConfig::new(seed, 3, 4, 4, 2, 1)
            .with_subtitles(true)
            .with_query_len(3),
    )?;
    let cfg = ModelConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        ff_mult: 2,
        frame_anchors: vec![AnchorSize::Radius(2), AnchorSize::All],
        event_anchors: vec![AnchorSize::Radius(1), AnchorSize::All],
        strategy: Strategy::Window { w: 2 },
        conv_kernel: 5,
        ..ModelConfig::default()
    }
    .for_corpus(&corpus);
    Ok((corpus, cfg))
}

fn check<F>(name: &str, params: &ParameterSet, exec: Execution, loss: F) -> Result<GradientResult>
where
    F: Fn(&ParameterSet) -> Result<(f64, Gradients)> + Sync + Send,
{
    let start = Instant::now();
    let max_rel_error = gradient_check_with(params, FD_STEP, exec, loss)?;
    Ok(GradientResult {
        loss: name.to_string(),
        parameters: params.scalar_count(),
        max_rel_error,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn finish(tape: &Tape, v: Var, params: &ParameterSet) -> Result<(f64, Gradients)> {
    Ok((tape.value(v).item(), tape.backward(v, params)?))
}

/// Checks InfoNCE, both retriever branches and their sum, and both Shared-Norm
/// heads and their sum.
pub fn run_gradient_suite(seed: u64, exec: Execution) -> Result<Vec<GradientResult>> {
    let (corpus, cfg) = suite_setup(seed)?;
    let mut out = Vec::new();

    let mut sims = ParameterSet::new(seed);
    sims.insert("sims", Matrix::new(1, 4, vec![0.31, -0.12, 0.27, 0.05])?)?;
    out.push(check("info_nce", &sims, exec, |p| {
        let mut tape = Tape::new();
        let s = tape.param(p, "sims")?;
        let pos = tape.slice_cols(s, 0, 1)?;
        let negs: Vec<Var> = (1..4).map(|c| tape.slice_cols(s, c, c + 1)).collect::<Result<_>>()?;
        let l = nce(&mut tape, pos, &negs, 0.1)?.expect("has negatives");
        finish(&tape, l, p)
    })?);

    let (retriever, rparams) = Retriever::init(cfg.clone(), seed)?;
    let weights = LossWeights::default();
    let batch: Vec<usize> = (0..corpus.queries().len()).collect();
    let retriever_terms: [(&str, fn(&BatchLoss) -> Var); 3] = [
        ("retriever.frame", |l| l.frame),
        ("retriever.event", |l| l.event),
        ("retriever.total", |l| l.total),
    ];
    for (name, pick) in retriever_terms {
        out.push(check(name, &rparams, exec, |p| {
            let mut tape = Tape::new();
            let l = batch_loss(&mut tape, &retriever, p, &corpus, &batch, &weights)?;
            finish(&tape, pick(&l), p)
        })?);
    }

    let (localizer, lparams) = Localizer::init(cfg, seed ^ 1)?;
    let gamma = LocalizerWeights::default().gamma;
    let q = &corpus.queries()[0];
    let tokens = q.token_features.to_matrix();
    let pos = corpus.video(&q.video_id).expect("synthetic corpus is valid");
    let negs: Vec<_> = corpus
        .videos()
        .iter()
        .filter(|v| v.video_id != q.video_id)
        .take(1)
        .collect();
    let localizer_terms: [(&str, fn(&LocalizerLoss) -> Var); 3] = [
        ("localizer.frame", |l| l.frame),
        ("localizer.event", |l| l.event),
        ("localizer.total", |l| l.total),
    ];
    for (name, pick) in localizer_terms {
        out.push(check(name, &lparams, exec, |p| {
            let mut tape = Tape::new();
            let l = localizer.query_loss(&mut tape, p, &tokens, q.moment, pos, &negs, gamma)?;
            finish(&tape, pick(&l), p)
        })?);
    }
    Ok(out)
}
