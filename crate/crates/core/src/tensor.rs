//! Dense tensors and a single-owner reverse-mode autodiff tape.
//!
//! Values are row-major `f64` arrays. Every operation on a [`Tape`] appends a
//! node whose inputs were recorded earlier, so the node vector is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Parameter(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let cols = self.cols();
        (0..self.rows()).map(|r| self.data[r * cols + c]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

/// Backward rule for an operation whose forward pass is computed outside the tape.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, in input order. `None` means no contribution.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Elementwise(ElementwiseOp, Var, Var),
    Scale(Var, f64),
    Activation(Activation, Var),
    Softmax(Var),
    SoftmaxCols(Var),
    Concat { a: Var, b: Var, axis: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Dropout { input: Var, scale: Vec<f64> },
    Transpose(Var),
    Column { input: Var, col: usize },
    StackColumns(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    GroupSum { input: Var, groups: Vec<Vec<usize>> },
    Normalize(Var),
    NegLog { input: Var, index: usize, clamped: bool },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomOp> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Probabilities below this are clamped inside [`Tape::neg_log`].
pub const LOG_CLAMP: f64 = 1e-12;

/// Records operations for one forward pass. Parameters are borrowed, not copied.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<ParamId, Var>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    // Four accumulators let the loop vectorise.
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (xs, ys) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += xs[l] * ys[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha · x`.
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        for (ci, arow) in c.iter_mut().zip(a.chunks_exact(k)) {
            *ci += dot(arow, b);
        }
        return;
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += aᵀ · b` for `a: k×m`, `b: k×n`, `c: m×n`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    if n == 1 {
        for (arow, &bp) in a.chunks_exact(m).zip(b) {
            if bp != 0.0 {
                axpy(bp, arow, c);
            }
        }
        return;
    }
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`, `c: m×n`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if k == 1 {
        // Outer product.
        for (crow, &ai) in c.chunks_exact_mut(n).zip(a) {
            if ai != 0.0 {
                axpy(ai, b, crow);
            }
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn as_matrix(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape.len() {
        1 => Some((t.shape[0], 1)),
        2 => Some((t.shape[0], t.shape[1])),
        _ => None,
    }
}

fn softmax_into(input: &[f64], mask: &[bool], out: &mut [f64]) -> Result<()> {
    let max = input
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidMask);
    }
    let mut total = 0.0;
    for ((o, &v), &m) in out.iter_mut().zip(input).zip(mask) {
        *o = if m { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// Masked softmax on plain slices, for callers outside the tape.
pub fn softmax_masked_values(input: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if input.len() != mask.len() {
        return Err(Error::Dimension {
            op: "softmax_masked",
            lhs: vec![input.len()],
            rhs: vec![mask.len()],
        });
    }
    let mut out = vec![0.0; input.len()];
    softmax_into(input, mask, &mut out)?;
    Ok(out)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut [f64] {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter once per tape; repeated calls return the same node.
    pub fn param(&mut self, set: &'p ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(set.get(id)), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (as_matrix(ta), as_matrix(tb)) {
            (Some(x), Some(y)) if ta.shape.len() == 2 => (x, y),
            _ => return Err(dim_err("matmul", ta, tb)),
        };
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&ta.data, &tb.data, &mut out, m, k, n);
        let shape = if tb.shape.len() == 1 { vec![m] } else { vec![m, n] };
        Ok(self.push_op(Tensor { shape, data: out }, Op::MatMul(a, b), &[a, b]))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(dim_err("elementwise", ta, tb));
        }
        let f: fn(f64, f64) -> f64 = match op {
            ElementwiseOp::Add => |x, y| x + y,
            ElementwiseOp::Sub => |x, y| x - y,
            ElementwiseOp::Mul => |x, y| x * y,
        };
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push_op(out, Op::Elementwise(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * factor).collect(),
        };
        self.push_op(out, Op::Scale(a, factor), &[a])
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Var {
        let t = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
        };
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        self.push_op(out, Op::Activation(kind, a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(Activation::Tanh, a)
    }

    /// Softmax over all entries of `a`, with masked entries forced to exactly zero.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if t.numel() != mask.len() {
            return Err(Error::Dimension {
                op: "softmax_masked",
                lhs: t.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = vec![0.0; t.numel()];
        softmax_into(&t.data, mask, &mut out)?;
        let out = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        Ok(self.push_op(
            out,
            Op::Softmax(a),
            &[a],
        ))
    }

    /// Column-wise softmax of a matrix; `row_mask` selects which rows take part.
    pub fn softmax_masked_cols(&mut self, a: Var, row_mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 || t.rows() != row_mask.len() {
            return Err(Error::Dimension {
                op: "softmax_masked_cols",
                lhs: t.shape.clone(),
                rhs: vec![row_mask.len()],
            });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows * cols];
        let mut col_in = vec![0.0; rows];
        let mut col_out = vec![0.0; rows];
        for c in 0..cols {
            for r in 0..rows {
                col_in[r] = t.data[r * cols + c];
            }
            softmax_into(&col_in, row_mask, &mut col_out)?;
            for r in 0..rows {
                out[r * cols + c] = col_out[r];
            }
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        Ok(self.push_op(
            out,
            Op::SoftmaxCols(a),
            &[a],
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let compatible = ta.shape.len() == tb.shape.len()
            && axis < ta.shape.len()
            && ta
                .shape
                .iter()
                .zip(&tb.shape)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(dim_err("concat", ta, tb));
        }
        let (outer, inner) = split_axis(&ta.shape, axis);
        let (na, nb) = (ta.shape[axis] * inner, tb.shape[axis] * inner);
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for o in 0..outer {
            data.extend_from_slice(&ta.data[o * na..(o + 1) * na]);
            data.extend_from_slice(&tb.data[o * nb..(o + 1) * nb]);
        }
        let mut shape = ta.shape.clone();
        shape[axis] += tb.shape[axis];
        Ok(self.push_op(Tensor { shape, data }, Op::Concat { a, b, axis }, &[a, b]))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: t.shape.clone(),
                rhs: vec![ids.len()],
            });
        }
        if ids.is_empty() {
            return Err(Error::Parameter("gather_rows needs at least one id".into()));
        }
        let (v, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(&t.data[id * d..(id + 1) * d]);
        }
        let out = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        Ok(self.push_op(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, returns `a` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(a);
        let scale: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&scale).map(|(x, s)| x * s).collect(),
        };
        Ok(self.push_op(out, Op::Dropout { input: a, scale }, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = match t.shape.len() {
            2 => (t.rows(), t.cols()),
            _ => {
                return Err(Error::Dimension {
                    op: "transpose",
                    lhs: t.shape.clone(),
                    rhs: vec![],
                })
            }
        };
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data[i * c + j];
            }
        }
        Ok(self.push_op(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(a),
            &[a],
        ))
    }

    /// Column `col` (0-based) of a matrix, as a vector.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 {
            return Err(Error::Dimension {
                op: "column",
                lhs: t.shape.clone(),
                rhs: vec![col],
            });
        }
        if col >= t.cols() {
            return Err(Error::Index {
                what: "matrix column",
                index: col,
                len: t.cols(),
            });
        }
        let out = Tensor::vector(t.column(col));
        Ok(self.push_op(out, Op::Column { input: a, col }, &[a]))
    }

    /// Stacks equal-length vectors as the columns of a matrix.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        let first = cols
            .first()
            .ok_or_else(|| Error::Parameter("stack_columns needs at least one column".into()))?;
        let n = self.value(*first).numel();
        for &c in cols {
            if self.value(c).shape != [n] {
                return Err(dim_err("stack_columns", self.value(*first), self.value(c)));
            }
        }
        let t = cols.len();
        let mut data = vec![0.0; n * t];
        for (j, &c) in cols.iter().enumerate() {
            for (i, &v) in self.value(c).data.iter().enumerate() {
                data[i * t + j] = v;
            }
        }
        Ok(self.push_op(
            Tensor {
                shape: vec![n, t],
                data,
            },
            Op::StackColumns(cols.to_vec()),
            cols,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(shape, t.data.clone()).map_err(|_| Error::Dimension {
            op: "reshape",
            lhs: t.shape.clone(),
            rhs: vec![t.numel()],
        })?;
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Output entry `g` is the sum of the input entries listed in `groups[g]`.
    pub fn group_sum(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(a);
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let mut s = 0.0;
            for &i in g {
                s += *t.data.get(i).ok_or(Error::Index {
                    what: "group_sum position",
                    index: i,
                    len: t.numel(),
                })?;
            }
            out.push(s);
        }
        if out.is_empty() {
            return Err(Error::Parameter("group_sum needs at least one group".into()));
        }
        Ok(self.push_op(
            Tensor::vector(out),
            Op::GroupSum {
                input: a,
                groups: groups.to_vec(),
            },
            &[a],
        ))
    }

    /// Divides every entry by the total.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let total: f64 = t.data.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Contract(format!("cannot normalize a vector with total {total}")));
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v / total).collect(),
        };
        Ok(self.push_op(out, Op::Normalize(a), &[a]))
    }

    /// `-ln(max(a[index], LOG_CLAMP))` as a scalar.
    pub fn neg_log(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        let p = *t.data.get(index).ok_or(Error::Index {
            what: "neg_log",
            index,
            len: t.numel(),
        })?;
        let clamped = !(p > LOG_CLAMP);
        let v = -p.max(LOG_CLAMP).ln();
        Ok(self.push_op(
            Tensor::scalar(v),
            Op::NegLog {
                input: a,
                index,
                clamped,
            },
            &[a],
        ))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomOp>) -> Var {
        self.push_op(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &*node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.cols();
                if self.requires_grad(*a) {
                    matmul_nt_acc(g, &tb.data, accumulate(grads, *a, m * k), m, n, k);
                }
                if self.requires_grad(*b) {
                    matmul_tn_acc(&ta.data, g, accumulate(grads, *b, k * n), m, k, n);
                }
            }
            Op::Elementwise(op, a, b) => {
                let n = g.len();
                match op {
                    ElementwiseOp::Add | ElementwiseOp::Sub => {
                        let sign = if *op == ElementwiseOp::Sub { -1.0 } else { 1.0 };
                        if self.requires_grad(*a) {
                            for (d, gv) in accumulate(grads, *a, n).iter_mut().zip(g) {
                                *d += gv;
                            }
                        }
                        if self.requires_grad(*b) {
                            for (d, gv) in accumulate(grads, *b, n).iter_mut().zip(g) {
                                *d += sign * gv;
                            }
                        }
                    }
                    ElementwiseOp::Mul => {
                        if self.requires_grad(*a) {
                            let other = &self.value(*b).data;
                            for ((d, gv), o) in accumulate(grads, *a, n).iter_mut().zip(g).zip(other) {
                                *d += gv * o;
                            }
                        }
                        if self.requires_grad(*b) {
                            let other = &self.value(*a).data;
                            for ((d, gv), o) in accumulate(grads, *b, n).iter_mut().zip(g).zip(other) {
                                *d += gv * o;
                            }
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                for (d, gv) in accumulate(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += gv * f;
                }
            }
            Op::Activation(kind, a) => {
                let y = &out.data;
                let d = accumulate(grads, *a, g.len());
                for ((d, gv), &y) in d.iter_mut().zip(g).zip(y) {
                    *d += gv
                        * match kind {
                            Activation::Sigmoid => y * (1.0 - y),
                            Activation::Tanh => 1.0 - y * y,
                        };
                }
            }
            Op::Softmax(input) => {
                let y = &out.data;
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                for ((d, gv), yv) in accumulate(grads, *input, g.len()).iter_mut().zip(g).zip(y) {
                    *d += yv * (gv - dot);
                }
            }
            Op::SoftmaxCols(input) => {
                let (rows, cols) = (out.rows(), out.cols());
                let y = &out.data;
                let d = accumulate(grads, *input, g.len());
                for c in 0..cols {
                    let dot: f64 = (0..rows).map(|r| g[r * cols + c] * y[r * cols + c]).sum();
                    for r in 0..rows {
                        let idx = r * cols + c;
                        d[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (outer, inner) = split_axis(&ta.shape, *axis);
                let (na, nb) = (ta.shape[*axis] * inner, tb.shape[*axis] * inner);
                if self.requires_grad(*a) {
                    let d = accumulate(grads, *a, ta.numel());
                    for o in 0..outer {
                        let src = &g[o * (na + nb)..o * (na + nb) + na];
                        for (x, y) in d[o * na..(o + 1) * na].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let d = accumulate(grads, *b, tb.numel());
                    for o in 0..outer {
                        let src = &g[o * (na + nb) + na..(o + 1) * (na + nb)];
                        for (x, y) in d[o * nb..(o + 1) * nb].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let dcols = t.cols();
                let d = accumulate(grads, *table, t.numel());
                for (r, &id) in ids.iter().enumerate() {
                    for (x, y) in d[id * dcols..(id + 1) * dcols]
                        .iter_mut()
                        .zip(&g[r * dcols..(r + 1) * dcols])
                    {
                        *x += y;
                    }
                }
            }
            Op::Dropout { input, scale } => {
                for ((d, gv), s) in accumulate(grads, *input, g.len()).iter_mut().zip(g).zip(scale) {
                    *d += gv * s;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let d = accumulate(grads, *a, g.len());
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::Column { input, col } => {
                let t = self.value(*input);
                let cols = t.cols();
                let d = accumulate(grads, *input, t.numel());
                for (r, gv) in g.iter().enumerate() {
                    d[r * cols + col] += gv;
                }
            }
            Op::StackColumns(inputs) => {
                let t = inputs.len();
                for (j, &c) in inputs.iter().enumerate() {
                    if !self.requires_grad(c) {
                        continue;
                    }
                    let n = self.value(c).numel();
                    let d = accumulate(grads, c, n);
                    for (i, x) in d.iter_mut().enumerate() {
                        *x += g[i * t + j];
                    }
                }
            }
            Op::Reshape(a) => {
                for (d, gv) in accumulate(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                for d in accumulate(grads, *a, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::GroupSum { input, groups } => {
                let n = self.value(*input).numel();
                let d = accumulate(grads, *input, n);
                for (gv, group) in g.iter().zip(groups) {
                    for &i in group {
                        d[i] += gv;
                    }
                }
            }
            Op::Normalize(a) => {
                let total: f64 = self.value(*a).data.iter().sum();
                let y = &out.data;
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                for (d, gv) in accumulate(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += (gv - dot) / total;
                }
            }
            Op::NegLog { input, index, clamped } => {
                let t = self.value(*input);
                let n = t.numel();
                if !clamped {
                    let p = t.data[*index];
                    accumulate(grads, *input, n)[*index] -= g[0] / p;
                }
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let contributions = rule.backward(&values, out, g);
                for (&v, contrib) in inputs.iter().zip(contributions) {
                    let Some(c) = contrib else { continue };
                    if !self.requires_grad(v) {
                        continue;
                    }
                    let d = accumulate(grads, v, c.len());
                    for (x, y) in d.iter_mut().zip(&c) {
                        *x += y;
                    }
                }
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when unreached.
    pub fn dense(&self, tape: &Tape<'_>, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
    }

    /// Adds the gradient of every parameter registered on `tape` into `into`.
    pub fn accumulate_params(&self, tape: &Tape<'_>, into: &mut ParamGrads) {
        for (&id, &v) in &tape.params {
            if let Some(g) = self.get(v) {
                into.add(id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_oracle() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let v = tape.constant(Tensor::from_rows(&[&[5.0], &[6.0]]));
        let c = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_inner_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let ones = tape.constant(Tensor::vector(vec![1.0; 3]));
        let m = tape.mul(a, ones).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 2.0, 3.0]);

        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0]);

        let p = tape.constant(Tensor::vector(vec![2.0, 3.0]));
        let q = tape.constant(Tensor::vector(vec![4.0, 5.0]));
        let r = tape.mul(p, q).unwrap();
        assert_eq!(tape.value(r).data(), &[8.0, 15.0]);

        assert!(matches!(tape.add(a, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn activations() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0, 50.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert!((tape.value(s).data()[1] - 1.0).abs() < 1e-9);
        let t = tape.tanh(z);
        assert_eq!(tape.value(t).data()[0], 0.0);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![0.0; 3]));
        let s = tape.softmax_masked(v, &[true; 3]).unwrap();
        assert!(close(tape.value(s).data(), &[1.0 / 3.0; 3], 1e-15));

        let v = tape.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let s = tape.softmax_masked(v, &[true, true]).unwrap();
        assert!(close(tape.value(s).data(), &[0.25, 0.75], 1e-15));

        let v = tape.constant(Tensor::vector(vec![5.0, 100.0]));
        let s = tape.softmax_masked(v, &[true, false]).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0]);

        assert!(matches!(
            tape.softmax_masked(v, &[false, false]),
            Err(Error::InvalidMask)
        ));
    }

    #[test]
    fn softmax_handles_huge_logits() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1000.0, 1001.0, -1000.0]));
        let s = tape.softmax_masked(v, &[true; 3]).unwrap();
        assert!(tape.value(s).is_finite());
        let total: f64 = tape.value(s).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0]));
        let c = tape.concat(a, b, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        let c = tape.concat(a, b, 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 5]);

        let d = tape.constant(Tensor::zeros(vec![3, 3]));
        assert!(matches!(tape.concat(a, d, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn concat_columns_interleaves_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(Tensor::from_rows(&[&[9.0], &[8.0]]));
        let c = tape.concat(a, b, 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn gather_rows_examples() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::identity(3), true);
        let row = tape.gather_rows(table, &[2]).unwrap();
        assert_eq!(tape.value(row).data(), &[0.0, 0.0, 1.0]);

        let twice = tape.gather_rows(table, &[0, 0]).unwrap();
        let loss = tape.sum(twice);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(table).unwrap();
        assert_eq!(&g[0..3], &[2.0, 2.0, 2.0]);
        assert_eq!(&g[3..9], &[0.0; 6]);

        match tape.gather_rows(table, &[3]) {
            Err(Error::Index { index, .. }) => assert_eq!(index, 3),
            _ => panic!("expected index error"),
        }
    }

    #[test]
    fn dropout_modes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
        let y = tape.dropout(x, 0.9, &mut rng, false).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
        assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());
        assert!(tape.dropout(x, -0.1, &mut rng, true).is_err());

        let big = tape.constant(Tensor::filled(vec![10_000], 1.0));
        let y = tape.dropout(big, 0.5, &mut rng, true).unwrap();
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let frac = kept as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.05, "surviving fraction {frac}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_mask_is_a_function_of_rng_state() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::filled(vec![64], 1.0));
            let y = tape.dropout(x, 0.3, &mut rng, true).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let p = tape.leaf(Tensor::vector(vec![5.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
        assert!(grads.get(p).is_none());
        assert_eq!(grads.dense(&tape, p), vec![0.0]);

        assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn neg_log_clamps() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.0, 1.0]), true);
        let l = tape.neg_log(p, 0).unwrap();
        assert!((tape.value(l).data()[0] + LOG_CLAMP.ln()).abs() < 1e-9);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.dense(&tape, p), vec![0.0, 0.0]);
    }
}
