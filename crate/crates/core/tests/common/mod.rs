//! Straight-line reference implementations used as oracles.
#![allow(dead_code)]

use vcmr_core::diff::{Matrix, ParameterSet};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn param(params: &ParameterSet, name: &str) -> Rows {
    rows(params.get(name).unwrap_or_else(|| panic!("missing parameter {name}")))
}

pub fn max_abs_diff(a: &Rows, b: &Matrix) -> f64 {
    assert_eq!(a.len(), b.rows());
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.cols());
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(r, c)).abs());
        }
    }
    worst
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// `x · W (+ b)` from parameters named `{name}.w` / `{name}.b`.
pub fn linear(x: &Rows, params: &ParameterSet, name: &str) -> Rows {
    let mut y = matmul(x, &param(params, &format!("{name}.w")));
    if let Some(b) = params.get(&format!("{name}.b")) {
        for row in &mut y {
            for (v, bias) in row.iter_mut().zip(b.row(0)) {
                *v += bias;
            }
        }
    }
    y
}

pub fn layer_norm(x: &Rows, params: &ParameterSet, name: &str) -> Rows {
    let g = param(params, &format!("{name}.gamma"));
    let b = param(params, &format!("{name}.beta"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / sd * g[0][i] + b[0][i])
                .collect()
        })
        .collect()
}

/// Multi-head attention from `x` to `y`; `allowed(h, i, j)` excludes keys.
pub fn attention(
    x: &Rows,
    y: &Rows,
    params: &ParameterSet,
    name: &str,
    heads: usize,
    allowed: impl Fn(usize, usize, usize) -> bool,
) -> Rows {
    let q = linear(x, params, &format!("{name}.q"));
    let k = linear(y, params, &format!("{name}.k"));
    let v = linear(y, params, &format!("{name}.v"));
    let d = q[0].len();
    let dh = d / heads;
    let mut cat = vec![vec![0.0; d]; x.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..x.len() {
            let mut w = vec![0.0; y.len()];
            for (j, wj) in w.iter_mut().enumerate() {
                if allowed(h, i, j) {
                    let s: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                    *wj = (s / (dh as f64).sqrt()).exp();
                }
            }
            let z: f64 = w.iter().sum();
            for c in cols.clone() {
                cat[i][c] = (0..y.len()).map(|j| w[j] / z * v[j][c]).sum();
            }
        }
    }
    linear(&cat, params, &format!("{name}.o"))
}

/// Maskless pre-norm Transformer encoder with ReLU feed-forward.
pub fn encoder(x: &Rows, params: &ParameterSet, name: &str, layers: usize, heads: usize) -> Rows {
    let mut h = x.clone();
    for l in 0..layers {
        let p = format!("{name}.l{l}");
        let n = layer_norm(&h, params, &format!("{p}.ln_attn"));
        h = add(&h, &attention(&n, &n, params, &format!("{p}.attn"), heads, |_, _, _| true));
        let n = layer_norm(&h, params, &format!("{p}.ln_ff"));
        let mut up = linear(&n, params, &format!("{p}.ff.up"));
        up.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
        h = add(&h, &linear(&up, params, &format!("{p}.ff.down")));
    }
    layer_norm(&h, params, &format!("{name}.ln_out"))
}

/// Zero-padded cross-correlation; kernel row `k · D_in + i`, column `o`.
pub fn conv1d(x: &Rows, kernel: &Rows, bias: &[f64], taps: usize) -> Rows {
    let t = x.len() as isize;
    let d_in = x[0].len();
    let r = (taps / 2) as isize;
    (0..t)
        .map(|pos| {
            (0..bias.len())
                .map(|o| {
                    let mut s = bias[o];
                    for k in 0..taps as isize {
                        let src = pos + k - r;
                        if src < 0 || src >= t {
                            continue;
                        }
                        for i in 0..d_in {
                            s += x[src as usize][i] * kernel[k as usize * d_in + i][o];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-8)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Inclusive-span IoU through explicit frame sets.
pub fn iou_sets(a: (usize, usize), b: (usize, usize)) -> f64 {
    use std::collections::BTreeSet;
    let sa: BTreeSet<usize> = (a.0..=a.1).collect();
    let sb: BTreeSet<usize> = (b.0..=b.1).collect();
    sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
}

pub fn random_rows(rng: &mut impl rand::Rng, r: usize, c: usize) -> Rows {
    (0..r)
        .map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_matrix(x: &Rows) -> Matrix {
    Matrix::from_rows(x)
}
