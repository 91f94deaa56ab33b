mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcmr_core::corpus::{synthesize_corpus, FeatureCorpus, Moment, SynthConfig};
use vcmr_core::diff::nn::AnchorSize;
use vcmr_core::diff::{Matrix, Tape};
use vcmr_core::events::{EventSegmentation, Strategy};
use vcmr_core::retriever::{ModelConfig, QueryEncoding, Retriever, VideoEncoding};
use vcmr_core::training::{
    batch_loss, branch_loss, event_score, frame_scores, info_nce, sample_event_branch, sample_frame_branch,
    similarity_rf, total_retriever_loss, train_retriever, BranchTerms, LossWeights, TrainConfig,
};

fn random_encoding(rng: &mut ChaCha8Rng, t: usize, dim: usize, subtitles: bool) -> VideoEncoding {
    let cuts: Vec<usize> = (1..t).filter(|_| rng.random_bool(0.3)).collect();
    let segmentation = EventSegmentation::from_boundaries(t, &cuts, Strategy::Window { w: 1 }).unwrap();
    let n = segmentation.len();
    let m = |rng: &mut ChaCha8Rng, r| common::to_matrix(&common::random_rows(rng, r, dim));
    VideoEncoding {
        frames: m(rng, t),
        subtitles: subtitles.then(|| m(rng, t)),
        events: m(rng, n),
        event_subtitles: subtitles.then(|| m(rng, t)),
        segmentation,
    }
}

fn random_query(rng: &mut ChaCha8Rng, dim: usize, subtitles: bool) -> QueryEncoding {
    let v = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    QueryEncoding {
        tokens: Matrix::zeros(1, dim),
        q_f: v(rng),
        q_s: subtitles.then(|| v(rng)),
    }
}

fn argmax(xs: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in xs {
        if best.is_none_or(|b| x > b.1) {
            best = Some((i, x));
        }
    }
    best.map(|b| b.0)
}

fn rf_oracle(q: &QueryEncoding, v: &VideoEncoding, t: usize) -> f64 {
    let f = common::cosine(&q.q_f, v.frames.row(t));
    match (&q.q_s, &v.subtitles) {
        (Some(qs), Some(s)) => (f + common::cosine(qs, s.row(t))) / 2.0,
        _ => f,
    }
}

#[test]
fn info_nce_closed_forms() {
    assert!((info_nce(0.0, &[0.0], 0.37) - 2f64.ln()).abs() < 1e-12);
    let tiny = info_nce(1.0, &[0.0], 0.01);
    assert!((0.0..1e-40).contains(&tiny));
    for k in 1..20 {
        let l = info_nce(0.42, &vec![0.42; k], 0.01);
        assert!((l - ((k + 1) as f64).ln()).abs() < 1e-9);
    }
    assert!(info_nce(1.0, &[-1.0, 0.99], 1e-4).is_finite());
}

#[test]
fn similarity_rf_examples() {
    let q = QueryEncoding {
        tokens: Matrix::zeros(1, 2),
        q_f: vec![2.0, 0.0],
        q_s: Some(vec![1.0, 0.0]),
    };
    let frame = [3.0, 0.0];
    let subtitle = [0.5, 3f64.sqrt() / 2.0];
    assert!((similarity_rf(&q, &frame, Some(&subtitle)) - 0.75).abs() < 1e-12);
    assert!((similarity_rf(&q, &[1.0, 1.0], None) - 0.5f64.sqrt()).abs() < 1e-12);
    let aligned = QueryEncoding { q_s: None, ..q };
    assert!((similarity_rf(&aligned, &[0.1, 0.0], None) - 1.0).abs() < 1e-12);
}

#[test]
fn whole_video_moment_has_no_weak_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pos = random_encoding(&mut rng, 6, 4, false);
    let negs = [random_encoding(&mut rng, 5, 4, false), random_encoding(&mut rng, 3, 4, false)];
    let q = random_query(&mut rng, 4, false);
    let neg_refs: Vec<(usize, &VideoEncoding)> = negs.iter().enumerate().map(|(i, v)| (i + 1, v)).collect();
    let s = sample_frame_branch(&q, &pos, Moment::new(0, 6), &neg_refs);
    assert_eq!(s.weak_positive, None);
    assert_eq!(s.negatives.len(), 2);
    assert_eq!(s.negatives[0].video, 1);
    assert_eq!(s.negatives[1].video, 2);
    let e = sample_event_branch(&q, &pos, &s, &neg_refs);
    assert_eq!(e.weak_positive, None);
}

#[test]
fn positive_event_contains_positive_frame() {
    let seg = EventSegmentation::from_boundaries(8, &[4], Strategy::Window { w: 4 }).unwrap();
    let mut frames = Matrix::zeros(8, 2);
    for t in 0..8 {
        frames.set(t, 0, 0.1);
        frames.set(t, 1, if t == 5 { 1.0 } else if t == 6 { 0.5 } else { -1.0 });
    }
    let pos = VideoEncoding {
        frames,
        subtitles: None,
        events: Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]),
        event_subtitles: None,
        segmentation: seg,
    };
    let q = QueryEncoding { tokens: Matrix::zeros(1, 2), q_f: vec![0.0, 1.0], q_s: None };
    let f = sample_frame_branch(&q, &pos, Moment::new(5, 6), &[]);
    assert_eq!((f.positive, f.weak_positive), (5, Some(6)));
    let e = sample_event_branch(&q, &pos, &f, &[]);
    assert_eq!(e.positive, 1);
    assert_eq!(e.weak_positive, None, "weak frame 6 shares the positive event");
}

#[test]
fn synthetic_positive_frame_lies_in_its_block() {
    let corpus = synthesize_corpus(&SynthConfig::new(12, 3, 9, 6, 3, 3)).unwrap();
    let cfg = model_config(&corpus, Strategy::Window { w: 3 });
    let (model, params) = Retriever::init(cfg, 12).unwrap();
    let encs = model.encode_corpus(&params, &corpus, vcmr_core::Execution::Sequential).unwrap();
    for q in corpus.queries() {
        let qe = model.encode_query(&params, &q.token_features.to_matrix()).unwrap();
        let gt = corpus.video_index(&q.video_id).unwrap();
        let s = sample_frame_branch(&qe, &encs[gt], q.moment, &[]);
        assert!(q.moment.contains(s.positive));
        let scores = frame_scores(&qe, &encs[gt]);
        assert_eq!(Some(s.positive), argmax((q.moment.start..q.moment.end).map(|t| (t, scores[t]))));
    }
}

#[test]
fn hardest_negatives_match_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for subtitles in [false, true] {
        for _ in 0..50 {
            let pos = random_encoding(&mut rng, 7, 4, subtitles);
            let negs: Vec<VideoEncoding> = (0..4)
                .map(|_| {
                    let t = rng.random_range(1..9);
                    random_encoding(&mut rng, t, 4, subtitles)
                })
                .collect();
            let q = random_query(&mut rng, 4, subtitles);
            let refs: Vec<(usize, &VideoEncoding)> = negs.iter().enumerate().map(|(i, v)| (10 + i, v)).collect();
            let f = sample_frame_branch(&q, &pos, Moment::new(2, 5), &refs);
            let e = sample_event_branch(&q, &pos, &f, &refs);
            for (i, v) in negs.iter().enumerate() {
                let t = v.frames.rows();
                assert_eq!(Some(f.negatives[i].index), argmax((0..t).map(|t| (t, rf_oracle(&q, v, t)))));
                let n = v.events.rows();
                let best_e = argmax((0..n).map(|e| (e, common::cosine(&q.q_f, v.events.row(e)))));
                assert_eq!(Some(e.negatives[i].index), best_e);
                let best_s = q.q_s.as_ref().map(|qs| {
                    let s = v.event_subtitles.as_ref().unwrap();
                    argmax((0..t).map(|t| (t, common::cosine(qs, s.row(t))))).unwrap()
                });
                assert_eq!(e.negatives[i].subtitle, best_s);
                assert_eq!(e.negatives[i].video, 10 + i);
            }
        }
    }
}

#[test]
fn branch_and_total_arithmetic() {
    let flat = BranchTerms { pos: 0.3, weak: None, negs: vec![0.3; 4], reverse_negs: vec![] };
    assert!((branch_loss(&flat, 0.5, 0.01) - 5f64.ln()).abs() < 1e-12);
    let lonely = BranchTerms { pos: 0.9, weak: None, negs: vec![], reverse_negs: vec![] };
    assert_eq!(branch_loss(&lonely, 0.5, 0.01), 0.0);
    assert!((total_retriever_loss(1.0, 1.0, 0.8) - 1.8).abs() < 1e-12);
    assert_eq!(total_retriever_loss(0.0, 0.7, 0.8), 0.7);
}

fn model_config(corpus: &FeatureCorpus, strategy: Strategy) -> ModelConfig {
    ModelConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        frame_anchors: vec![AnchorSize::Radius(2), AnchorSize::All],
        event_anchors: vec![AnchorSize::Radius(1), AnchorSize::All],
        strategy,
        ..ModelConfig::default()
    }
    .for_corpus(corpus)
}

/// Frame and event branch averages recomputed from detached encodings.
fn recomputed_loss(
    model: &Retriever,
    params: &vcmr_core::diff::ParameterSet,
    corpus: &FeatureCorpus,
    batch: &[usize],
    w: &LossWeights,
) -> (f64, f64) {
    let queries: Vec<_> = batch.iter().map(|&i| &corpus.queries()[i]).collect();
    let gt: Vec<usize> = queries.iter().map(|q| corpus.video_index(&q.video_id).unwrap()).collect();
    let mut videos = gt.clone();
    videos.sort_unstable();
    videos.dedup();
    let enc: std::collections::HashMap<usize, VideoEncoding> = videos
        .iter()
        .map(|&v| (v, model.encode_video(params, &corpus.videos()[v]).unwrap()))
        .collect();
    let qenc: Vec<QueryEncoding> = queries
        .iter()
        .map(|q| model.encode_query(params, &q.token_features.to_matrix()).unwrap())
        .collect();
    let (mut lf, mut le) = (0.0, 0.0);
    for (i, q) in queries.iter().enumerate() {
        let g = gt[i];
        let negs: Vec<(usize, &VideoEncoding)> = videos.iter().filter(|&&v| v != g).map(|&v| (v, &enc[&v])).collect();
        let f = sample_frame_branch(&qenc[i], &enc[&g], q.moment, &negs);
        let e = sample_event_branch(&qenc[i], &enc[&g], &f, &negs);
        let others: Vec<usize> = (0..queries.len()).filter(|&k| k != i && gt[k] != g).collect();

        let rf = |qe: &QueryEncoding, v: &VideoEncoding, t: usize| rf_oracle(qe, v, t);
        let frame_terms = BranchTerms {
            pos: rf(&qenc[i], &enc[&g], f.positive),
            weak: f.weak_positive.map(|t| rf(&qenc[i], &enc[&g], t)),
            negs: f.negatives.iter().map(|n| rf(&qenc[i], &enc[&n.video], n.index)).collect(),
            reverse_negs: others.iter().map(|&k| rf(&qenc[k], &enc[&g], f.positive)).collect(),
        };
        let ev = |qe: &QueryEncoding, v: &VideoEncoding, e: usize, s: Option<usize>| {
            let c = common::cosine(&qe.q_f, v.events.row(e));
            match (&qe.q_s, &v.event_subtitles, s) {
                (Some(qs), Some(m), Some(s)) => (c + common::cosine(qs, m.row(s))) / 2.0,
                _ => c,
            }
        };
        let sub = corpus.has_subtitles();
        let event_terms = BranchTerms {
            pos: ev(&qenc[i], &enc[&g], e.positive, sub.then_some(e.positive_frame)),
            weak: e.weak_positive.map(|x| ev(&qenc[i], &enc[&g], x, e.weak_frame)),
            negs: e.negatives.iter().map(|n| ev(&qenc[i], &enc[&n.video], n.index, n.subtitle)).collect(),
            reverse_negs: others
                .iter()
                .map(|&k| ev(&qenc[k], &enc[&g], e.positive, sub.then_some(e.positive_frame)))
                .collect(),
        };
        assert!((event_terms.pos - event_score(&qenc[i], &enc[&g], e.positive, e.positive_frame)).abs() < 1e-9);
        lf += branch_loss(&frame_terms, w.omega, w.temperature);
        le += branch_loss(&event_terms, w.omega, w.temperature);
    }
    let b = batch.len() as f64;
    (lf / b, le / b)
}

#[test]
fn batch_loss_matches_recomputation_from_raw_similarities() {
    let corpus = synthesize_corpus(&SynthConfig::new(31, 4, 8, 6, 2, 2).with_subtitles(true)).unwrap();
    let (model, params) = Retriever::init(model_config(&corpus, Strategy::Window { w: 3 }), 31).unwrap();
    let w = LossWeights { temperature: 0.5, ..LossWeights::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = corpus.queries().len();
    for size in [1, 3, n] {
        let mut batch: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(batch.as_mut_slice(), &mut rng);
        batch.truncate(size);
        let mut tape = Tape::new();
        let l = batch_loss(&mut tape, &model, &params, &corpus, &batch, &w).unwrap();
        let (frame, event) = recomputed_loss(&model, &params, &corpus, &batch, &w);
        let got = |v| tape.value(v).item();
        assert!((got(l.frame) - frame).abs() < 1e-6, "frame {} vs {frame}", got(l.frame));
        assert!((got(l.event) - event).abs() < 1e-6, "event {} vs {event}", got(l.event));
        assert!((got(l.total) - total_retriever_loss(frame, event, w.lambda)).abs() < 1e-6);
        if size == 1 {
            assert_eq!(got(l.total), 0.0);
        }
    }
}

fn tiny_train(batch_size: usize) -> Vec<vcmr_core::training::StepLog> {
    let corpus = synthesize_corpus(&SynthConfig::new(5, 3, 6, 4, 2, 2)).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size, seed: 9, ..TrainConfig::default() };
    let mut seen = 0;
    let out = train_retriever(&corpus, model_config(&corpus, Strategy::Window { w: 2 }), &cfg, &LossWeights::default(), |_| seen += 1).unwrap();
    assert_eq!(seen, out.log.len());
    out.log
}

#[test]
fn training_is_deterministic_and_runs_with_batch_one() {
    let a = tiny_train(4);
    let b = tiny_train(4);
    assert_eq!(a, b);
    let ones = tiny_train(1);
    assert_eq!(ones.len(), 3 * 6);
    assert!(ones.iter().all(|s| s.l == 0.0 && s.l_f == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn info_nce_is_non_negative_and_decreasing(
        pos in -1.0f64..1.0,
        bump in 1e-3f64..0.5,
        negs in proptest::collection::vec(-1.0f64..1.0, 0..6),
        t in 0.01f64..1.0,
    ) {
        let l = info_nce(pos, &negs, t);
        prop_assert!(l >= 0.0 && l.is_finite());
        if !negs.is_empty() {
            prop_assert!(info_nce(pos + bump, &negs, t) < l);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sampling_constraints_hold(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subtitles = rng.random_bool(0.5);
        let m = rng.random_range(1..6);
        let encs: Vec<VideoEncoding> = (0..m).map(|_| {
            let t = rng.random_range(1..10);
            random_encoding(&mut rng, t, 3, subtitles)
        }).collect();
        let g = rng.random_range(0..m);
        let t = encs[g].frames.rows();
        let st = rng.random_range(0..t);
        let moment = Moment::new(st, rng.random_range(st + 1..=t));
        let q = random_query(&mut rng, 3, subtitles);
        let negs: Vec<(usize, &VideoEncoding)> = (0..m).filter(|&v| v != g).map(|v| (v, &encs[v])).collect();
        let f = sample_frame_branch(&q, &encs[g], moment, &negs);
        let e = sample_event_branch(&q, &encs[g], &f, &negs);
        prop_assert!(moment.contains(f.positive));
        prop_assert_eq!(f.weak_positive.is_some(), moment.len() < t);
        if let Some(w) = f.weak_positive {
            prop_assert!(!moment.contains(w));
        }
        let seg = &encs[g].segmentation;
        prop_assert!(seg.spans()[e.positive].contains(f.positive));
        if let Some(we) = e.weak_positive {
            prop_assert!(we != e.positive);
            prop_assert!(seg.spans()[we].contains(e.weak_frame.unwrap()));
        }
        for s in [&f, &e] {
            prop_assert_eq!(s.negatives.len(), m - 1);
            for n in &s.negatives {
                prop_assert!(n.video != g);
            }
        }
    }
}
