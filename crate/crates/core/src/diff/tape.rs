//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`], which binds a tensor of a [`ParameterSet`] once per
//! tape; after [`Tape::backward`] their gradients come back as [`Gradients`]
//! aligned with the parameter set's index order.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Gradients, ParameterSet};
use super::tensor::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Standardize { x: Var, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Softmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MaxPool { x: Var, argmax: Vec<usize> },
    Pick { x: Var, flat: Vec<usize> },
    LogSumExp(Var),
    Sum(Var),
    Unfold { x: Var, kernel: usize },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Row mask for [`Tape::masked_softmax`]: `true` marks an allowed position.
pub type Mask = Arc<Vec<bool>>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient outside the tape.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds the named parameter. Repeated lookups return the same node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let v = self.push(params.tensor(idx).clone(), Op::Param(idx));
        self.bound.insert(idx, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = va.matmul(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} x {:?}ᵀ", va.shape(), vb.shape()),
            ));
        }
        let out = va.matmul_bt(vb);
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let vb = self.value(b);
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(vb.data()) {
            *o -= y;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let vb = self.value(b);
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (ra, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        if rr != 1 || cr != ca {
            return Err(Error::shape(op, format!("{ra}x{ca} with row {rr}x{cr}")));
        }
        Ok(())
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Per-row `(x − mean) / sqrt(var + eps)`; the affine part of layer
    /// normalization is applied separately.
    pub fn standardize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::Standardize { x: a, inv_std })
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = n.max(eps);
            for v in row.iter_mut() {
                *v /= d;
            }
            // A floored norm is stored negated so backward can tell the cases apart.
            norms.push(if n > eps { n } else { -eps });
        }
        self.push(out, Op::L2Normalize { x: a, norms })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.masked_softmax(a, None)
    }

    /// Row softmax where disallowed positions get weight exactly 0.
    /// Every row must keep at least one allowed position.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&Mask>) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = Matrix::zeros(x.rows(), cols);
        for r in 0..x.rows() {
            let src = x.row(r);
            let allowed = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let max = (0..cols)
                .filter(|&c| allowed(c))
                .map(|c| src[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let dst = out.row_mut(r);
            let mut total = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    let e = (src[c] - max).exp();
                    dst[c] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {} rows", x.rows()),
            ));
        }
        let out = x.slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {} cols", x.cols()),
            ));
        }
        let mut out = Matrix::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("cols {} vs {cols}", v.cols()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Matrix::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("rows {} vs {rows}", v.rows()),
                ));
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Coordinatewise maximum over each half-open row span; one output row per span.
    /// Ties route the gradient to the earliest row.
    pub fn max_pool_rows(&mut self, a: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = Matrix::zeros(spans.len(), cols);
        let mut argmax = Vec::with_capacity(spans.len() * cols);
        for (n, &(s, e)) in spans.iter().enumerate() {
            if s >= e || e > x.rows() {
                return Err(Error::shape(
                    "max_pool_rows",
                    format!("span {s}..{e} of {} rows", x.rows()),
                ));
            }
            for c in 0..cols {
                let mut best = s;
                for r in s + 1..e {
                    if x.get(r, c) > x.get(best, c) {
                        best = r;
                    }
                }
                out.set(n, c, x.get(best, c));
                argmax.push(best);
            }
        }
        Ok(self.push(out, Op::MaxPool { x: a, argmax }))
    }

    /// Gathers `(row, col)` entries into a `1 × k` row.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let x = self.value(a);
        let mut flat = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= x.rows() || c >= x.cols() {
                return Err(Error::shape(
                    "pick",
                    format!("({r},{c}) of {:?}", x.shape()),
                ));
            }
            flat.push(r * x.cols() + c);
        }
        let vals: Vec<f64> = flat.iter().map(|&i| x.data()[i]).collect();
        Ok(self.push(Matrix::row_vector(&vals), Op::Pick { x: a, flat }))
    }

    /// `log Σ exp` over every entry, with max subtraction.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(log_sum_exp(self.value(a).data()));
        self.push(out, Op::LogSumExp(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).data().iter().sum());
        self.push(out, Op::Sum(a))
    }

    /// Sliding windows of `kernel` rows (zero padded by `(kernel − 1) / 2` at each
    /// end) flattened into one row per position: `T × (kernel · D)`.
    pub fn unfold(&mut self, a: Var, kernel: usize) -> Result<Var> {
        if kernel % 2 == 0 {
            return Err(Error::shape("unfold", format!("kernel {kernel} is even")));
        }
        let x = self.value(a);
        let (t, d) = x.shape();
        let pad = (kernel - 1) / 2;
        let mut out = Matrix::zeros(t, kernel * d);
        for i in 0..t {
            for k in 0..kernel {
                let src = i as isize + k as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    out.row_mut(i)[k * d..(k + 1) * d].copy_from_slice(x.row(src as usize));
                }
            }
        }
        Ok(self.push(out, Op::Unfold { x: a, kernel }))
    }

    /// Reverse pass from a scalar `loss`; returns gradients for every bound parameter.
    pub fn backward(&self, loss: Var, params: &ParameterSet) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::zeros_like(params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(idx) => out.accumulate(*idx, &g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_at(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = hadamard(&g, self.value(*b));
                    let gb = hadamard(&g, self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, column_sums(&g));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row);
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    let mut gr = Matrix::zeros(1, r.cols());
                    for rr in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.set(rr, c, g.get(rr, c) * r.get(0, c));
                            gr.data_mut()[c] += g.get(rr, c) * x.get(rr, c);
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.map(|v| v * c));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Standardize { x, inv_std } => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (gy[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let n = norms[r];
                        if n > 0.0 {
                            let proj = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                            for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = (gy[c] - yr[c] * proj) / n;
                            }
                        } else {
                            let d = -n;
                            for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = gy[c] / d;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let inner = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gy[c] - inner);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, _) = self.shape(p);
                        acc(&mut grads, p, g.slice_rows(offset, offset + rows));
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut gp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc(&mut grads, p, gp);
                        offset += cols;
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    for n in 0..g.rows() {
                        for c in 0..cols {
                            let r = argmax[n * cols + c];
                            gx.data_mut()[r * cols + c] += g.get(n, c);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Pick { x, flat } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    for (k, &i) in flat.iter().enumerate() {
                        gx.data_mut()[i] += g.data()[k];
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LogSumExp(a) => {
                    let x = self.value(*a);
                    let lse = node.value.item();
                    let gv = g.item();
                    let gx = x.map(|v| gv * (v - lse).exp());
                    acc(&mut grads, *a, gx);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut grads, *a, Matrix::filled(rows, cols, g.item()));
                }
                Op::Unfold { x, kernel } => {
                    let (t, d) = self.shape(*x);
                    let pad = (kernel - 1) / 2;
                    let mut gx = Matrix::zeros(t, d);
                    for i in 0..t {
                        for k in 0..*kernel {
                            let src = i as isize + k as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let gsrc = &g.row(i)[k * d..(k + 1) * d];
                                for (o, v) in gx.row_mut(src as usize).iter_mut().zip(gsrc) {
                                    *o += v;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (o, y) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= y;
    }
    out
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Numerically stable `log Σ exp(x)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::gradient_check;

    fn params_with(name: &str, m: Matrix) -> ParameterSet {
        let mut p = ParameterSet::new(0);
        p.insert(name, m).unwrap();
        p
    }

    #[test]
    fn matmul_chain_gradients_match_finite_differences() {
        let mut p = ParameterSet::new(0);
        p.insert("a", Matrix::from_rows(&[[0.3, -0.2], [0.5, 0.9]])).unwrap();
        p.insert("b", Matrix::from_rows(&[[1.1, 0.4, -0.7], [0.2, -0.3, 0.8]])).unwrap();
        let err = gradient_check(&p, 1e-5, |ps| {
            let mut t = Tape::new();
            let a = t.param(ps, "a")?;
            let b = t.param(ps, "b")?;
            let c = t.matmul(a, b)?;
            let n = t.l2_normalize_rows(c, 1e-8);
            let s = t.softmax_rows(n);
            let ct = t.transpose(s);
            let back = t.matmul(a, s)?;
            let p1 = t.matmul(back, ct)?;
            let p2 = t.matmul_bt(back, s)?;
            let prod = t.add(p1, p2)?;
            let lse = t.log_sum_exp(prod);
            let grads = t.backward(lse, ps)?;
            Ok((t.value(lse).item(), grads))
        })
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn pooling_and_layout_ops_gradients_match() {
        let p = params_with(
            "x",
            Matrix::from_rows(&[[0.1, 0.7, -0.4], [0.9, -0.5, 0.2], [0.3, 0.8, 0.6], [-0.2, 0.4, 1.3]]),
        );
        let err = gradient_check(&p, 1e-5, |ps| {
            let mut t = Tape::new();
            let x = t.param(ps, "x")?;
            let pooled = t.max_pool_rows(x, &[(0, 2), (2, 4)])?;
            let top = t.slice_rows(x, 1, 3)?;
            let left = t.slice_cols(top, 0, 2)?;
            let right = t.slice_cols(top, 2, 3)?;
            let recombined = t.concat_cols(&[right, left])?;
            let stacked = t.concat_rows(&[pooled, recombined])?;
            let st = t.standardize_rows(stacked, 1e-5);
            let r = t.relu(st);
            let u = t.unfold(r, 3)?;
            let picked = t.pick(u, &[(0, 1), (3, 4), (2, 8)])?;
            let sq = t.mul(picked, picked)?;
            let s = t.sum(sq);
            let grads = t.backward(s, ps)?;
            Ok((t.value(s).item(), grads))
        })
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn masked_softmax_gives_exact_zero_weight() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[1.0, 2.0, 3.0], [0.5, 0.5, 9.0]]));
        let mask: Mask = Arc::new(vec![true, true, false, false, true, true]);
        let s = t.masked_softmax(x, Some(&mask));
        let v = t.value(s);
        assert_eq!(v.get(0, 2), 0.0);
        assert_eq!(v.get(1, 0), 0.0);
        for r in 0..2 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
        let row = t.constant(Matrix::zeros(1, 2));
        assert!(t.add_row(a, row).is_err());
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
