mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcmr_core::corpus::codec::{encode_features, HEADER_LEN};
use vcmr_core::corpus::{
    block_spans, load_corpus, read_features, synthesize_corpus, write_corpus, write_features,
    FeatureCorpus, FeatureMatrix, Moment, QueryRecord, Split, SynthConfig, VideoRecord,
};
use vcmr_core::events::build_tsm;

#[test]
fn one_by_one_zero_matrix_is_header_plus_four_zero_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.evtf");
    write_features(&FeatureMatrix::zeros(1, 1), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 20);
    assert_eq!(&bytes[..4], b"EVTF");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
    assert_eq!(&bytes[16..], &[0u8; 4]);
}

#[test]
fn two_by_three_file_is_forty_bytes() {
    let m = FeatureMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let bytes = encode_features(&m).unwrap();
    assert_eq!(bytes.len(), HEADER_LEN + 24);
    let payload: Vec<f32> = bytes[16..]
        .chunks(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(payload, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn random_matrix_round_trips_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..20).map(|_| rng.random_range(-10.0f32..10.0)).collect();
    let m = FeatureMatrix::new(5, 4, data.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.evtf");
    write_features(&m, &path).unwrap();
    let back = read_features(&path).unwrap();
    assert_eq!((back.rows(), back.cols()), (5, 4));
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(back.data()), bits(&data));
}

#[test]
fn short_payload_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.evtf");
    let mut bytes = encode_features(&FeatureMatrix::zeros(4, 2)).unwrap();
    bytes.truncate(HEADER_LEN + 3 * 2 * 4);
    std::fs::write(&path, bytes).unwrap();
    assert_eq!(read_features(&path).unwrap_err().kind(), "FormatError");
}

#[test]
fn bad_magic_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.evtf");
    let mut bytes = encode_features(&FeatureMatrix::zeros(1, 1)).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, bytes).unwrap();
    assert_eq!(read_features(&path).unwrap_err().kind(), "FormatError");
}

#[test]
fn missing_manifest_is_an_ingest_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_corpus(&dir.path().join("nope.jsonl")).unwrap_err();
    assert_eq!(err.kind(), "IngestError");
}

#[test]
fn single_video_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    let video = VideoRecord {
        video_id: "only".into(),
        frame_features: FeatureMatrix::new(4, 8, (0..32).map(|v| v as f32).collect()).unwrap(),
        subtitle_features: None,
        frame_duration_s: 1.5,
    };
    let query = QueryRecord {
        query_id: "q".into(),
        video_id: "only".into(),
        token_features: FeatureMatrix::zeros(2, 8),
        moment: Moment::new(1, 3),
        split: Split::Train,
    };
    let corpus = FeatureCorpus::new(vec![video], vec![query]).unwrap();
    let manifest = write_corpus(&corpus, dir.path()).unwrap();
    let back = load_corpus(&manifest).unwrap();
    assert_eq!(back.videos().len(), 1);
    assert_eq!(back.queries().len(), 1);
    assert!(back.bits_eq(&corpus));
}

#[test]
fn synthetic_corpus_survives_write_and_load() {
    let corpus = synthesize_corpus(&SynthConfig::new(7, 4, 10, 6, 3, 2).with_subtitles(true)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let back = load_corpus(&write_corpus(&corpus, dir.path()).unwrap()).unwrap();
    assert_eq!(back.videos().len(), corpus.videos().len());
    for (a, b) in back.videos().iter().zip(corpus.videos()) {
        assert!(a.bits_eq(b), "video {}", a.video_id);
    }
    for (a, b) in back.queries().iter().zip(corpus.queries()) {
        assert!(a.bits_eq(b), "query {}", a.query_id);
    }
}

#[test]
fn two_block_corpus_cuts_at_frame_four() {
    let corpus = synthesize_corpus(&SynthConfig::new(1, 2, 8, 16, 2, 3)).unwrap();
    assert_eq!(block_spans(8, 2), vec![Moment::new(0, 4), Moment::new(4, 8)]);
    for q in corpus.queries() {
        assert!(q.moment == Moment::new(0, 4) || q.moment == Moment::new(4, 8));
    }
}

#[test]
fn synthesis_is_deterministic_in_seed() {
    let cfg = SynthConfig::new(11, 3, 9, 5, 3, 2).with_subtitles(true);
    let a = synthesize_corpus(&cfg).unwrap();
    let b = synthesize_corpus(&cfg).unwrap();
    assert!(a.bits_eq(&b));
    let c = synthesize_corpus(&SynthConfig { seed: 12, ..cfg }).unwrap();
    assert!(!a.bits_eq(&c));
}

#[test]
fn noise_free_video_has_an_exact_block_tsm() {
    let corpus = synthesize_corpus(&SynthConfig::new(4, 3, 8, 12, 2, 1).with_noise(0.0)).unwrap();
    for v in corpus.videos() {
        let x = common::rows(&v.frame_features.to_matrix());
        for i in 0..8 {
            for j in 0..8 {
                if i / 4 == j / 4 {
                    assert_eq!(x[i], x[j]);
                }
            }
        }
        let tsm = build_tsm(&v.frame_features.to_matrix()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let oracle = common::cosine(&x[i], &x[j]);
                let want = if i / 4 == j / 4 { 1.0 } else { 0.0 };
                assert!((oracle - want).abs() < 1e-6);
                assert!((tsm.get(i, j) - want).abs() < 1e-6, "({i},{j}) = {}", tsm.get(i, j));
            }
        }
    }
}

#[test]
fn events_beyond_frames_is_an_argument_error() {
    let err = synthesize_corpus(&SynthConfig::new(1, 1, 3, 4, 4, 1)).unwrap_err();
    assert_eq!(err.kind(), "ArgumentError");
}

#[test]
fn dangling_query_is_a_validation_error() {
    let video = VideoRecord {
        video_id: "a".into(),
        frame_features: FeatureMatrix::zeros(3, 2),
        subtitle_features: None,
        frame_duration_s: 1.5,
    };
    let query = QueryRecord {
        query_id: "q".into(),
        video_id: "b".into(),
        token_features: FeatureMatrix::zeros(1, 2),
        moment: Moment::new(0, 1),
        split: Split::Train,
    };
    let err = FeatureCorpus::new(vec![video], vec![query]).unwrap_err();
    assert_eq!(err.kind(), "ValidationError");
}

fn random_corpus(seed: u64) -> FeatureCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let videos = rng.random_range(1..5);
    let dim = rng.random_range(1..6);
    let sub_dim = rng.random_range(1..4);
    let q_dim = rng.random_range(1..5);
    let with_subs = rng.random_bool(0.5);
    let mut vs = Vec::new();
    let mut qs = Vec::new();
    for i in 0..videos {
        let t = rng.random_range(1..9);
        let vals = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f32> {
            (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0xbfff_ffff)).collect()
        };
        let frames = FeatureMatrix::new(t, dim, vals(&mut rng, t * dim)).unwrap();
        let subs = with_subs.then(|| {
            let mut m = FeatureMatrix::new(t, sub_dim, vals(&mut rng, t * sub_dim)).unwrap();
            for r in 0..t {
                if rng.random_bool(0.4) {
                    m.row_mut(r).fill(0.0);
                }
            }
            m
        });
        let id = format!("video-{i}");
        for j in 0..rng.random_range(0..3) {
            let st = rng.random_range(0..t);
            let ed = rng.random_range(st + 1..=t);
            let l = rng.random_range(1..4);
            qs.push(QueryRecord {
                query_id: format!("{id}/q{j}"),
                video_id: id.clone(),
                token_features: FeatureMatrix::new(l, q_dim, vals(&mut rng, l * q_dim)).unwrap(),
                moment: Moment::new(st, ed),
                split: if rng.random_bool(0.5) { Split::Train } else { Split::Val },
            });
        }
        vs.push(VideoRecord {
            video_id: id,
            frame_features: frames,
            subtitle_features: subs,
            frame_duration_s: rng.random_range(0.5..3.0),
        });
    }
    FeatureCorpus::new(vs, qs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_corpora_round_trip_bit_exactly(seed in any::<u64>()) {
        let corpus = random_corpus(seed);
        let dir = tempfile::tempdir().unwrap();
        let back = load_corpus(&write_corpus(&corpus, dir.path()).unwrap()).unwrap();
        prop_assert!(back.bits_eq(&corpus));
        for (a, b) in back.videos().iter().zip(corpus.videos()) {
            for t in 0..a.num_frames() {
                prop_assert_eq!(a.has_subtitle_at(t), b.has_subtitle_at(t));
                if !b.has_subtitle_at(t) {
                    if let Some(s) = &a.subtitle_features {
                        prop_assert!(s.row(t).iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }
}

