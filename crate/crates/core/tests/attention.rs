mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcmr_core::diff::gradcheck::gradient_check;
use vcmr_core::diff::nn::{
    anchor_mask, conv1d_forward, cross_attention_forward, distance_matrix, mhsa_forward, AnchorFormer,
    AnchorMaskSpec, AnchorSize, Conv1d, EncoderShape, MultiHeadAttention,
};
use vcmr_core::diff::{Matrix, ParameterSet, Tape};

fn attention_layer(seed: u64, dim: usize, heads: usize) -> (MultiHeadAttention, ParameterSet) {
    let mut params = ParameterSet::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = MultiHeadAttention::init(&mut params, &mut rng, "attn", dim, heads).unwrap();
    (layer, params)
}

/// Zero query/key projections, identity value/output projections.
fn averaging_layer(dim: usize, heads: usize) -> (MultiHeadAttention, ParameterSet) {
    let (layer, mut params) = attention_layer(0, dim, heads);
    for name in ["attn.q.w", "attn.q.b", "attn.k.w", "attn.v.b", "attn.o.b"] {
        params.get_mut(name).unwrap().scale_assign(0.0);
    }
    *params.get_mut("attn.v.w").unwrap() = Matrix::identity(dim);
    *params.get_mut("attn.o.w").unwrap() = Matrix::identity(dim);
    (layer, params)
}

/// Replaces every layer-norm gain and bias with random values.
fn perturb_norms(params: &mut ParameterSet, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params
        .names()
        .filter(|n| n.ends_with(".gamma") || n.ends_with(".beta"))
        .map(str::to_string)
        .collect();
    for n in names {
        for v in params.get_mut(&n).unwrap().data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
}

#[test]
fn anchor_mask_matches_distance_predicate() {
    let m = anchor_mask(64, AnchorSize::Radius(9));
    let mut count = 0;
    for i in 0..64usize {
        for j in 0..64usize {
            assert_eq!(m[i][j], i.abs_diff(j) <= 9);
            count += 1;
        }
    }
    assert_eq!(count, 4096);
    assert!(anchor_mask(3, AnchorSize::All).iter().flatten().all(|&b| b));
    let small = anchor_mask(4, AnchorSize::Radius(1));
    assert_eq!(small.iter().flatten().filter(|&&b| b).count(), 10);
}

#[test]
fn uniform_attention_averages_rows() {
    let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 4.0]]);
    let (layer, params) = averaging_layer(2, 2);
    let out = mhsa_forward(&x, &params, &layer, &AnchorMaskSpec::all(2)).unwrap();
    for r in 0..3 {
        assert!((out.get(r, 0) - 1.5).abs() < 1e-12);
        assert!((out.get(r, 1) - 5.0 / 3.0).abs() < 1e-12);
    }
    let spec = AnchorMaskSpec::new(vec![AnchorSize::Radius(1); 2]);
    let out = mhsa_forward(&x, &params, &layer, &spec).unwrap();
    assert!((out.get(0, 0) - 2.0).abs() < 1e-12);
    assert!((out.get(0, 1) - 0.5).abs() < 1e-12);
}

#[test]
fn anchored_attention_matches_dense_oracle() {
    let (layer, params) = attention_layer(11, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = common::random_rows(&mut rng, 5, 4);
    let spec = AnchorMaskSpec::new(vec![AnchorSize::Radius(2); 2]);
    let got = mhsa_forward(&common::to_matrix(&x), &params, &layer, &spec).unwrap();
    let want = common::attention(&x, &x, &params, "attn", 2, |_, i, j| i.abs_diff(j) <= 2);
    assert!(common::max_abs_diff(&want, &got) < 1e-6);

    let spec = AnchorMaskSpec::round_robin(&[AnchorSize::Radius(1), AnchorSize::All], 2);
    let got = mhsa_forward(&common::to_matrix(&x), &params, &layer, &spec).unwrap();
    let want = common::attention(&x, &x, &params, "attn", 2, |h, i, j| h == 1 || i.abs_diff(j) <= 1);
    assert!(common::max_abs_diff(&want, &got) < 1e-6);
}

#[test]
fn weights_are_row_stochastic_with_exact_zeros() {
    let (layer, params) = attention_layer(3, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = common::to_matrix(&common::random_rows(&mut rng, 9, 6));
    let spec = AnchorMaskSpec::new(vec![AnchorSize::Radius(1), AnchorSize::Radius(3), AnchorSize::All]);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (_, weights) = layer
        .forward_with_weights(&mut tape, &params, xv, xv, &spec.sequence_masks(9))
        .unwrap();
    for (h, w) in weights.iter().enumerate() {
        for i in 0..9 {
            let sum: f64 = w.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for j in 0..9 {
                if !spec.sizes()[h].allows(i.abs_diff(j) as f64) {
                    assert_eq!(w.get(i, j), 0.0);
                } else {
                    assert!(w.get(i, j) > 0.0);
                }
            }
        }
    }
}

#[test]
fn shifting_inputs_and_masks_shifts_outputs() {
    let (layer, params) = attention_layer(5, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = common::random_rows(&mut rng, 7, 4);
    let t = x.len();
    let spec = AnchorMaskSpec::new(vec![AnchorSize::Radius(2), AnchorSize::All]);
    let base = mhsa_forward(&common::to_matrix(&x), &params, &layer, &spec).unwrap();

    let rolled: Vec<Vec<f64>> = (0..t).map(|i| x[(i + t - 1) % t].clone()).collect();
    let pos: Vec<f64> = (0..t).map(|i| ((i + t - 1) % t) as f64).collect();
    let masks = spec.masks(&distance_matrix(&pos, &pos));
    let mut tape = Tape::new();
    let xv = tape.constant(common::to_matrix(&rolled));
    let out = layer.forward(&mut tape, &params, xv, xv, &masks).unwrap();
    let out = tape.value(out);
    for i in 0..t {
        for c in 0..4 {
            assert!((out.get(i, c) - base.get((i + t - 1) % t, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_examples() {
    let (layer, params) = averaging_layer(2, 1);
    let x = Matrix::from_rows(&[[3.0, 1.0], [-2.0, 0.0], [7.0, 7.0]]);
    let y = Matrix::from_rows(&[[0.25, -4.0]]);
    let out = cross_attention_forward(&x, &y, &params, &layer).unwrap();
    for r in 0..3 {
        assert_eq!(out.row(r), y.row(0));
    }

    let (layer, params) = attention_layer(8, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = common::to_matrix(&common::random_rows(&mut rng, 5, 4));
    let cross = cross_attention_forward(&x, &x, &params, &layer).unwrap();
    let own = mhsa_forward(&x, &params, &layer, &AnchorMaskSpec::all(2)).unwrap();
    assert!(cross.max_abs_diff(&own) < 1e-12);
}

#[test]
fn cross_attention_matches_dense_oracle() {
    let (layer, params) = attention_layer(13, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = common::random_rows(&mut rng, 4, 6);
    let y = common::random_rows(&mut rng, 3, 6);
    let got = cross_attention_forward(&common::to_matrix(&x), &common::to_matrix(&y), &params, &layer).unwrap();
    let want = common::attention(&x, &y, &params, "attn", 3, |_, _, _| true);
    assert!(common::max_abs_diff(&want, &got) < 1e-6);
}

#[test]
fn mismatched_width_is_a_shape_error() {
    let (layer, params) = attention_layer(1, 4, 2);
    let x = Matrix::zeros(3, 5);
    let err = mhsa_forward(&x, &params, &layer, &AnchorMaskSpec::all(2)).unwrap_err();
    assert_eq!(err.kind(), "ShapeError");
    let mut p = ParameterSet::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(MultiHeadAttention::init(&mut p, &mut rng, "bad", 5, 2).is_err());
}

fn conv_layer(seed: u64, taps: usize, d_in: usize, d_out: usize) -> (Conv1d, ParameterSet) {
    let mut params = ParameterSet::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = Conv1d::init(&mut params, &mut rng, "conv", taps, d_in, d_out).unwrap();
    (conv, params)
}

#[test]
fn conv_examples() {
    let (conv, mut params) = conv_layer(2, 5, 3, 2);
    params.get_mut(conv.kernel_name()).unwrap().scale_assign(0.0);
    *params.get_mut(conv.bias_name()).unwrap() = Matrix::row_vector(&[0.7, -1.25]);
    let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [-1.0, 0.0, 9.0]]);
    let out = conv1d_forward(&x, &params, &conv).unwrap();
    for r in 0..3 {
        assert_eq!(out.row(r), &[0.7, -1.25]);
    }

    let (conv, mut params) = conv_layer(2, 3, 1, 1);
    *params.get_mut(conv.kernel_name()).unwrap() = Matrix::new(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
    params.get_mut(conv.bias_name()).unwrap().scale_assign(0.0);
    let x = Matrix::new(4, 1, vec![0.5, -3.0, 2.0, 8.0]).unwrap();
    assert_eq!(conv1d_forward(&x, &params, &conv).unwrap(), x);

    let mut p = ParameterSet::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(Conv1d::init(&mut p, &mut rng, "even", 4, 1, 1).is_err());
}

#[test]
fn conv_matches_triple_loop_oracle() {
    let (conv, params) = conv_layer(17, 3, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = common::random_rows(&mut rng, 6, 2);
    let got = conv1d_forward(&common::to_matrix(&x), &params, &conv).unwrap();
    let kernel = common::param(&params, "conv.kernel");
    let bias = common::param(&params, "conv.b");
    let want = common::conv1d(&x, &kernel, &bias[0], 3);
    assert!(common::max_abs_diff(&want, &got) < 1e-6);
}

#[test]
fn sum_of_squares_gradient_is_exact() {
    let mut params = ParameterSet::new(0);
    params.insert("theta", Matrix::new(2, 2, vec![0.5, -1.5, 2.0, 0.25]).unwrap()).unwrap();
    let err = gradient_check(&params, 1e-4, |p| {
        let mut tape = Tape::new();
        let th = tape.param(p, "theta")?;
        let sq = tape.mul(th, th)?;
        let l = tape.sum(sq);
        let g = tape.backward(l, p)?;
        Ok((tape.value(l).item(), g))
    })
    .unwrap();
    assert!(err < 1e-8, "max relative error {err}");
    let mut tape = Tape::new();
    let th = tape.param(&params, "theta").unwrap();
    let sq = tape.mul(th, th).unwrap();
    let l = tape.sum(sq);
    let g = tape.backward(l, &params).unwrap();
    assert_eq!(g.get(0).data(), &[1.0, -3.0, 4.0, 0.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn all_anchor_former_is_a_vanilla_transformer(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.random_range(1..4);
        let dim = heads * rng.random_range(1..4);
        let layers = rng.random_range(1..4);
        let t = rng.random_range(1..10);
        let shape = EncoderShape { dim, layers, heads, ff_mult: 2, cross_attention: false };
        let mut params = ParameterSet::new(seed);
        let enc = AnchorFormer::init(&mut params, &mut rng, "enc", shape).unwrap();
        perturb_norms(&mut params, &mut rng);
        let x = common::random_rows(&mut rng, t, dim);
        let want = common::encoder(&x, &params, "enc", layers, heads);
        for spec in [
            AnchorMaskSpec::all(heads),
            AnchorMaskSpec::new(vec![AnchorSize::Radius(t); heads]),
        ] {
            let mut tape = Tape::new();
            let xv = tape.constant(common::to_matrix(&x));
            let out = enc.forward(&mut tape, &params, xv, &spec.sequence_masks(t), None).unwrap();
            prop_assert!(common::max_abs_diff(&want, tape.value(out)) < 1e-6);
        }
    }
}
