//! Layers built on the tape: affine maps, layer normalization, anchor-masked
//! multi-head attention, pre-norm Transformer blocks and 1-D convolution.

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::params::ParameterSet;
use super::tape::{Mask, Tape, Var};
use super::tensor::Matrix;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Attention radius of one head: a finite neighborhood or the whole sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorSize {
    Radius(usize),
    All,
}

impl AnchorSize {
    pub fn allows(self, distance: f64) -> bool {
        match self {
            AnchorSize::All => true,
            AnchorSize::Radius(a) => distance <= a as f64 + 1e-9,
        }
    }
}

impl fmt::Display for AnchorSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnchorSize::Radius(a) => write!(f, "{a}"),
            AnchorSize::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for AnchorSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(AnchorSize::All);
        }
        s.parse::<usize>()
            .map(AnchorSize::Radius)
            .map_err(|_| format!("anchor size `{s}` is neither an integer nor `all`"))
    }
}

impl Serialize for AnchorSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AnchorSize::Radius(a) => s.serialize_u64(*a as u64),
            AnchorSize::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for AnchorSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match &v {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|a| AnchorSize::Radius(a as usize))
                .ok_or_else(|| serde::de::Error::custom("anchor size must be a non-negative integer")),
            serde_json::Value::String(s) => s.parse().map_err(serde::de::Error::custom),
            _ => Err(serde::de::Error::custom("anchor size must be an integer or \"all\"")),
        }
    }
}

/// `mask[i][j]` is true iff `a` is `All` or `|i − j| ≤ a`.
pub fn anchor_mask(t: usize, a: AnchorSize) -> Vec<Vec<bool>> {
    (0..t)
        .map(|i| {
            (0..t)
                .map(|j| a.allows((i as f64 - j as f64).abs()))
                .collect()
        })
        .collect()
}

/// Per-head anchor sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorMaskSpec {
    sizes: Vec<AnchorSize>,
}

impl AnchorMaskSpec {
    pub fn new(sizes: Vec<AnchorSize>) -> Self {
        Self { sizes }
    }

    /// Heads take the listed sizes in turn.
    pub fn round_robin(list: &[AnchorSize], heads: usize) -> Self {
        let sizes = if list.is_empty() {
            vec![AnchorSize::All; heads]
        } else {
            (0..heads).map(|h| list[h % list.len()]).collect()
        };
        Self { sizes }
    }

    pub fn all(heads: usize) -> Self {
        Self {
            sizes: vec![AnchorSize::All; heads],
        }
    }

    pub fn heads(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[AnchorSize] {
        &self.sizes
    }

    /// Builds one mask per head from a `queries × keys` distance matrix.
    pub fn masks(&self, distances: &Matrix) -> HeadMasks {
        HeadMasks(
            self.sizes
                .iter()
                .map(|&a| match a {
                    AnchorSize::All => None,
                    AnchorSize::Radius(_) => Some(Arc::new(
                        distances.data().iter().map(|&d| a.allows(d)).collect(),
                    )),
                })
                .collect(),
        )
    }

    /// Masks for a plain sequence where token `i` sits at position `i`.
    pub fn sequence_masks(&self, len: usize) -> HeadMasks {
        let pos: Vec<f64> = (0..len).map(|i| i as f64).collect();
        self.masks(&distance_matrix(&pos, &pos))
    }
}

/// `|a_i − b_j|` for every pair.
pub fn distance_matrix(a: &[f64], b: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(a.len(), b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            m.set(i, j, (x - y).abs());
        }
    }
    m
}

/// One optional mask per head; `None` means unrestricted.
#[derive(Clone, Debug)]
pub struct HeadMasks(Vec<Option<Mask>>);

impl HeadMasks {
    pub fn unmasked(heads: usize) -> Self {
        Self(vec![None; heads])
    }

    pub fn heads(&self) -> usize {
        self.0.len()
    }

    pub fn head(&self, h: usize) -> Option<&Mask> {
        self.0[h].as_ref()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        params: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = format!("{name}.w");
        params.init_uniform(&weight, in_dim, out_dim, in_dim, rng)?;
        let bias = if bias {
            let b = format!("{name}.b");
            params.init_uniform(&b, 1, out_dim, in_dim, rng)?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }

    /// `x · W + b`.
    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, x: Var) -> Result<Var> {
        let w = tape.param(params, &self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(params, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn init(params: &mut ParameterSet, name: &str, dim: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        params.insert(&gamma, Matrix::filled(1, dim, 1.0))?;
        params.insert(&beta, Matrix::zeros(1, dim))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, x: Var) -> Result<Var> {
        let z = tape.standardize_rows(x, LN_EPS);
        let g = tape.param(params, &self.gamma)?;
        let b = tape.param(params, &self.beta)?;
        let scaled = tape.mul_row(z, g)?;
        tape.add_row(scaled, b)
    }
}

/// Multi-head attention with per-head masks; scores are scaled by `√(D/h)`.
/// The key projection has no bias: it would shift each score row by a constant.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn init(
        params: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Argument(format!(
                "dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::init(params, rng, &format!("{name}.q"), dim, dim, true)?,
            key: Linear::init(params, rng, &format!("{name}.k"), dim, dim, false)?,
            value: Linear::init(params, rng, &format!("{name}.v"), dim, dim, true)?,
            output: Linear::init(params, rng, &format!("{name}.o"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// Attends from `queries` (`n × D`) to `keys_values` (`m × D`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        queries: Var,
        keys_values: Var,
        masks: &HeadMasks,
    ) -> Result<Var> {
        let (out, _) = self.forward_inner(tape, params, queries, keys_values, masks)?;
        Ok(out)
    }

    /// Like [`forward`](Self::forward) but also returns each head's attention weights.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        queries: Var,
        keys_values: Var,
        masks: &HeadMasks,
    ) -> Result<(Var, Vec<Matrix>)> {
        let (out, weights) = self.forward_inner(tape, params, queries, keys_values, masks)?;
        let weights = weights.into_iter().map(|w| tape.value(w).clone()).collect();
        Ok((out, weights))
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        queries: Var,
        keys_values: Var,
        masks: &HeadMasks,
    ) -> Result<(Var, Vec<Var>)> {
        let (n, dq) = tape.shape(queries);
        let (m, dk) = tape.shape(keys_values);
        if dq != self.dim || dk != self.dim {
            return Err(Error::shape(
                "attention",
                format!("inputs have width {dq}/{dk}, layer expects {}", self.dim),
            ));
        }
        if masks.heads() != self.heads {
            return Err(Error::shape(
                "attention",
                format!("{} masks for {} heads", masks.heads(), self.heads),
            ));
        }
        let q = self.query.forward(tape, params, queries)?;
        let k = self.key.forward(tape, params, keys_values)?;
        let v = self.value.forward(tape, params, keys_values)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mask = masks.head(h);
            if let Some(mask) = mask {
                if mask.len() != n * m {
                    return Err(Error::shape(
                        "attention",
                        format!("mask of {} entries for {n}x{m} scores", mask.len()),
                    ));
                }
            }
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.masked_softmax(scores, mask);
            weights.push(attn);
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        Ok((self.output.forward(tape, params, cat)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn init(
        params: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        mult: usize,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::init(params, rng, &format!("{name}.up"), dim, dim * mult, true)?,
            down: Linear::init(params, rng, &format!("{name}.down"), dim * mult, dim, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, params, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, params, h)
    }
}

/// Pre-norm residual block: self-attention, optional cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct AnchorBlock {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderShape {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub cross_attention: bool,
}

/// Stack of [`AnchorBlock`]s followed by a final layer norm. With
/// all-`All` masks this is a vanilla Transformer encoder.
#[derive(Clone, Debug)]
pub struct AnchorFormer {
    blocks: Vec<AnchorBlock>,
    final_norm: LayerNorm,
    shape: EncoderShape,
}

impl AnchorFormer {
    pub fn init(
        params: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        shape: EncoderShape,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let p = format!("{name}.l{l}");
            let norm_attn = LayerNorm::init(params, &format!("{p}.ln_attn"), shape.dim)?;
            let attn = MultiHeadAttention::init(params, rng, &format!("{p}.attn"), shape.dim, shape.heads)?;
            let cross = if shape.cross_attention {
                Some((
                    LayerNorm::init(params, &format!("{p}.ln_cross"), shape.dim)?,
                    MultiHeadAttention::init(params, rng, &format!("{p}.cross"), shape.dim, shape.heads)?,
                ))
            } else {
                None
            };
            let norm_ff = LayerNorm::init(params, &format!("{p}.ln_ff"), shape.dim)?;
            let ff = FeedForward::init(params, rng, &format!("{p}.ff"), shape.dim, shape.ff_mult)?;
            blocks.push(AnchorBlock {
                norm_attn,
                attn,
                cross,
                norm_ff,
                ff,
            });
        }
        let final_norm = LayerNorm::init(params, &format!("{name}.ln_out"), shape.dim)?;
        Ok(Self {
            blocks,
            final_norm,
            shape,
        })
    }

    pub fn shape(&self) -> EncoderShape {
        self.shape
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        x: Var,
        masks: &HeadMasks,
        context: Option<Var>,
    ) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            let n = block.norm_attn.forward(tape, params, h)?;
            let a = block.attn.forward(tape, params, n, n, masks)?;
            h = tape.add(h, a)?;
            if let Some((norm, cross)) = &block.cross {
                let ctx = context.ok_or_else(|| {
                    Error::shape("anchor_former", "cross-attention layer needs a context")
                })?;
                let n = norm.forward(tape, params, h)?;
                let c = cross.forward(tape, params, n, ctx, &HeadMasks::unmasked(cross.heads))?;
                h = tape.add(h, c)?;
            }
            let n = block.norm_ff.forward(tape, params, h)?;
            let f = block.ff.forward(tape, params, n)?;
            h = tape.add(h, f)?;
        }
        self.final_norm.forward(tape, params, h)
    }
}

/// 1-D convolution along time with zero padding so output length equals input length.
/// The kernel is stored as a `(K · D_in) × D_out` matrix whose row `k · D_in + i`
/// holds the weights of tap `k`, input channel `i`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    kernel: String,
    bias: String,
    pub taps: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Conv1d {
    pub fn init(
        params: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        taps: usize,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        if taps.is_multiple_of(2) {
            return Err(Error::Argument(format!("convolution kernel size {taps} must be odd")));
        }
        let kernel = format!("{name}.kernel");
        let bias = format!("{name}.b");
        params.init_uniform(&kernel, taps * in_dim, out_dim, taps * in_dim, rng)?;
        params.init_uniform(&bias, 1, out_dim, taps * in_dim, rng)?;
        Ok(Self {
            kernel,
            bias,
            taps,
            in_dim,
            out_dim,
        })
    }

    pub fn kernel_name(&self) -> &str {
        &self.kernel
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, x: Var) -> Result<Var> {
        if tape.shape(x).1 != self.in_dim {
            return Err(Error::shape(
                "conv1d",
                format!("input width {} vs {}", tape.shape(x).1, self.in_dim),
            ));
        }
        let cols = tape.unfold(x, self.taps)?;
        let k = tape.param(params, &self.kernel)?;
        let b = tape.param(params, &self.bias)?;
        let y = tape.matmul(cols, k)?;
        tape.add_row(y, b)
    }
}

/// Anchor-masked self-attention of a plain sequence.
pub fn mhsa_forward(
    x: &Matrix,
    params: &ParameterSet,
    attn: &MultiHeadAttention,
    spec: &AnchorMaskSpec,
) -> Result<Matrix> {
    if spec.heads() != attn.heads {
        return Err(Error::shape(
            "mhsa_forward",
            format!("{} anchor sizes for {} heads", spec.heads(), attn.heads),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let masks = spec.sequence_masks(x.rows());
    let out = attn.forward(&mut tape, params, xv, xv, &masks)?;
    Ok(tape.value(out).clone())
}

/// Unmasked attention from `x` to `y`.
pub fn cross_attention_forward(
    x: &Matrix,
    y: &Matrix,
    params: &ParameterSet,
    attn: &MultiHeadAttention,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let out = attn.forward(&mut tape, params, xv, yv, &HeadMasks::unmasked(attn.heads))?;
    Ok(tape.value(out).clone())
}

pub fn conv1d_forward(x: &Matrix, params: &ParameterSet, conv: &Conv1d) -> Result<Matrix> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = conv.forward(&mut tape, params, xv)?;
    Ok(tape.value(out).clone())
}
