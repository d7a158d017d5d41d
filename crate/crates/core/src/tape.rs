//! Reverse-mode differentiation over batched 2-D tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes in reverse and accumulates the
//! gradient of a scalar loss into a flat parameter vector: every
//! [`Tape::param`] leaf owns a contiguous range of that vector.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and inputs always have smaller ids than their consumers.

use std::hash::{Hash, Hasher};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::lie::{self, TangentSE3};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(x: f64) -> Self {
        Self::new(1, 1, vec![x])
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self::new(data.len(), 1, data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self::new(1, data.len(), data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// `c = alpha · a·b + beta · c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the slices cover every strided element addressed for the given
    // dimensions (checked above in debug builds, guaranteed by callers).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Sin,
    Cos,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param { offset: usize },
    Affine { x: Var, w: Var, b: Option<Var> },
    Unary { x: Var, f: Unary },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x[r, c] * s[r, 0]`
    MulCol { x: Var, s: Var },
    Scale { x: Var, a: f64 },
    AddScalar { x: Var },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { x: Var, index: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    SegmentSum { x: Var, seg: usize },
    SegmentExclusiveCumsum { x: Var, seg: usize },
    SegmentDiff { x: Var, seg: usize },
    Sum(Var),
    Encode { x: Var, freqs: usize },
    Se3Act { xi: Var, points: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Unary { f, .. } => f.name(),
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulCol { .. } => "mul_col",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::SegmentSum { .. } => "segment_sum",
            Op::SegmentExclusiveCumsum { .. } => "segment_exclusive_cumsum",
            Op::SegmentDiff { .. } => "segment_diff",
            Op::Sum(_) => "sum",
            Op::Encode { .. } => "encode",
            Op::Se3Act { .. } => "se3_act",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    num_params: usize,
}

impl Tape {
    /// `num_params` is the length of the flat gradient returned by [`Tape::backward`].
    pub fn new(num_params: usize) -> Self {
        Self { nodes: Vec::new(), num_params }
    }

    pub fn num_params(&self) -> usize {
        self.num_params
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

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node {} is not a scalar", v.0);
        t.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    /// Leaf whose gradient lands in `grad[offset..offset + t.len()]`.
    pub fn param(&mut self, t: Tensor, offset: usize) -> Var {
        assert!(
            offset + t.len() <= self.num_params,
            "parameter block {}..{} exceeds gradient length {}",
            offset,
            offset + t.len(),
            self.num_params
        );
        self.push(t, Op::Param { offset }, true)
    }

    /// `x·w (+ b)` with `x: m×k`, `w: k×n`, `b: 1×n`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (m, k) = self.value(x).shape();
        let (k2, n) = self.value(w).shape();
        assert_eq!(k, k2, "affine inner dimensions {k} vs {k2}");
        let mut out = match b {
            Some(b) => {
                let bv = self.value(b);
                assert_eq!(bv.shape(), (1, n), "bias must be 1x{n}");
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend_from_slice(&bv.data);
                }
                d
            }
            None => vec![0.0; m * n],
        };
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            m,
            k,
            n,
            1.0,
            &self.value(x).data,
            (k, 1),
            &self.value(w).data,
            (n, 1),
            beta,
            &mut out,
            (n, 1),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(m, n, out), Op::Affine { x, w, b }, rg)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.value(x).map(|v| f.apply(v));
        let rg = self.rg(x);
        self.push(out, Op::Unary { x, f }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{} operands differ in shape", op.name());
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.rows, va.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Scales every row of `x` by the matching entry of the column `s`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        assert_eq!(vs.shape(), (vx.rows, 1), "mul_col scale must be a column");
        let cols = vx.cols;
        let mut data = vx.data.clone();
        for (row, &f) in data.chunks_mut(cols.max(1)).zip(&vs.data) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::new(vx.rows, cols, data);
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::MulCol { x, s }, rg)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        let out = self.value(x).map(|v| a * v);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, a }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, a: f64) -> Var {
        let out = self.value(x).map(|v| v + a);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar { x }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(v.rows * len);
        for r in 0..v.rows {
            data.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(v.rows, len, data);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    /// Output row `i` is row `index[i]` of `x`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Var {
        let v = self.value(x);
        let mut data = Vec::with_capacity(index.len() * v.cols);
        for &i in &index {
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Tensor::new(index.len(), v.cols, data);
        let rg = self.rg(x);
        self.push(out, Op::Gather { x, index }, rg)
    }

    /// Each row of `x` repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let mut data = Vec::with_capacity(v.len() * times);
        for r in 0..v.rows {
            for _ in 0..times {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let out = Tensor::new(v.rows * times, v.cols, data);
        let rg = self.rg(x);
        self.push(out, Op::RepeatRows { x, times }, rg)
    }

    fn check_segments(&self, x: Var, seg: usize) {
        let rows = self.value(x).rows;
        assert!(seg > 0 && rows.is_multiple_of(seg), "{rows} rows do not split into segments of {seg}");
    }

    /// Sums consecutive groups of `seg` rows.
    pub fn segment_sum(&mut self, x: Var, seg: usize) -> Var {
        self.check_segments(x, seg);
        let v = self.value(x);
        let (rows, cols) = (v.rows / seg, v.cols);
        let mut data = vec![0.0; rows * cols];
        for (r, out) in data.chunks_mut(cols.max(1)).enumerate() {
            for s in 0..seg {
                for (o, &a) in out.iter_mut().zip(v.row_slice(r * seg + s)) {
                    *o += a;
                }
            }
        }
        let out = Tensor::new(rows, cols, data);
        let rg = self.rg(x);
        self.push(out, Op::SegmentSum { x, seg }, rg)
    }

    /// Within each group of `seg` rows, row `j` becomes the sum of rows `0..j`.
    pub fn segment_exclusive_cumsum(&mut self, x: Var, seg: usize) -> Var {
        self.check_segments(x, seg);
        let v = self.value(x);
        let cols = v.cols;
        let mut data = vec![0.0; v.len()];
        for g in 0..v.rows / seg {
            let mut acc = vec![0.0; cols];
            for s in 0..seg {
                let r = g * seg + s;
                data[r * cols..(r + 1) * cols].copy_from_slice(&acc);
                for (a, &b) in acc.iter_mut().zip(v.row_slice(r)) {
                    *a += b;
                }
            }
        }
        let out = Tensor::new(v.rows, cols, data);
        let rg = self.rg(x);
        self.push(out, Op::SegmentExclusiveCumsum { x, seg }, rg)
    }

    /// Adjacent differences `x[j + 1] − x[j]` within each group of `seg` rows.
    pub fn segment_diff(&mut self, x: Var, seg: usize) -> Var {
        self.check_segments(x, seg);
        assert!(seg >= 2, "segment_diff needs segments of at least two rows");
        let v = self.value(x);
        let cols = v.cols;
        let groups = v.rows / seg;
        let mut data = Vec::with_capacity(groups * (seg - 1) * cols);
        for g in 0..groups {
            for s in 0..seg - 1 {
                let (a, b) = (v.row_slice(g * seg + s), v.row_slice(g * seg + s + 1));
                data.extend(a.iter().zip(b).map(|(x0, x1)| x1 - x0));
            }
        }
        let out = Tensor::new(groups * (seg - 1), cols, data);
        let rg = self.rg(x);
        self.push(out, Op::SegmentDiff { x, seg }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sinusoidal encoding: every input scalar `x` expands to
    /// `sin(2⁰πx), cos(2⁰πx), …, sin(2ᴷπx), cos(2ᴷπx)` with `K = freqs − 1`.
    pub fn encode(&mut self, x: Var, freqs: usize) -> Var {
        let out = encode_tensor(self.value(x), freqs);
        let rg = self.rg(x);
        self.push(out, Op::Encode { x, freqs }, rg)
    }

    /// Applies `exp(xi)` (a 1×6 tangent, rotation first) to every row of the
    /// k×3 `points`.
    pub fn se3_act(&mut self, xi: Var, points: Var) -> Var {
        let xv = self.value(xi);
        assert_eq!(xv.shape(), (1, 6), "se3_act tangent must be 1x6");
        let pose = lie::exp(&TangentSE3::from_slice(&xv.data));
        let pv = self.value(points);
        assert_eq!(pv.cols, 3, "se3_act points must be kx3");
        let mut data = Vec::with_capacity(pv.len());
        for r in 0..pv.rows {
            let p = pose.act(&Vector3::from_row_slice(pv.row_slice(r)));
            data.extend_from_slice(p.as_slice());
        }
        let out = Tensor::new(pv.rows, 3, data);
        let rg = self.rg(xi) || self.rg(points);
        self.push(out, Op::Se3Act { xi, points }, rg)
    }

    /// Hash of every ReLU activation pattern on the tape. Two evaluations with
    /// equal signatures lie in the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Unary { x, f: Unary::Relu } = node.op {
                for &v in &self.nodes[x.0].value.data {
                    (v > 0.0).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Gradient of the scalar `loss` with respect to every parameter leaf,
    /// laid out as the flat vector declared in [`Tape::new`].
    pub fn backward(&self, loss: Var) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_params];
        self.backward_into(loss, 1.0, &mut out)?;
        Ok(out)
    }

    /// Accumulates `weight · ∂loss/∂params` into `grad`.
    pub fn backward_into(&self, loss: Var, weight: f64, grad: &mut [f64]) -> Result<()> {
        assert_eq!(grad.len(), self.num_params, "gradient buffer length");
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(weight));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &node.op, g, &mut grads, grad)?;
        }
        Ok(())
    }

    fn propagate(
        &self,
        id: usize,
        op: &Op,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        flat: &mut [f64],
    ) -> Result<()> {
        let name = op.name();
        let send = |grads: &mut [Option<Tensor>], target: Var, t: Tensor| -> Result<()> {
            if !self.rg(target) {
                return Ok(());
            }
            if let Some(bad) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::non_finite(
                    format!("backward through {name} (node {id})"),
                    format!("gradient entry {bad} is {}", t.data[bad]),
                ));
            }
            match &mut grads[target.0] {
                Some(acc) => {
                    debug_assert_eq!(acc.shape(), t.shape());
                    acc.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b);
                }
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        let value = &self.nodes[id].value;
        match op {
            Op::Const => {}
            Op::Param { offset } => {
                if let Some(bad) = g.data.iter().position(|v| !v.is_finite()) {
                    return Err(Error::non_finite(
                        format!("parameter gradient at offset {offset}"),
                        format!("entry {bad} is {}", g.data[bad]),
                    ));
                }
                for (dst, v) in flat[*offset..*offset + g.len()].iter_mut().zip(&g.data) {
                    *dst += v;
                }
            }
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (m, k, n) = (xv.rows, xv.cols, wv.cols);
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, &g.data, (n, 1), &wv.data, (1, n), 0.0, &mut dx, (k, 1));
                    send(grads, *x, Tensor::new(m, k, dx))?;
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, &xv.data, (1, k), &g.data, (n, 1), 0.0, &mut dw, (n, 1));
                    send(grads, *w, Tensor::new(k, n, dw))?;
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; n];
                        for row in g.data.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        send(grads, *b, Tensor::new(1, n, db))?;
                    }
                }
            }
            Op::Unary { x, f } => {
                let xv = self.value(*x);
                let data = xv
                    .data
                    .iter()
                    .zip(&value.data)
                    .zip(&g.data)
                    .map(|((&xi, &yi), &gi)| gi * f.derivative(xi, yi))
                    .collect();
                send(grads, *x, Tensor::new(g.rows, g.cols, data))?;
            }
            Op::Add(a, b) => {
                send(grads, *a, g.clone())?;
                send(grads, *b, g)?;
            }
            Op::Sub(a, b) => {
                send(grads, *b, g.map(|v| -v))?;
                send(grads, *a, g)?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
                let db = g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect();
                send(grads, *a, Tensor::new(g.rows, g.cols, da))?;
                send(grads, *b, Tensor::new(g.rows, g.cols, db))?;
            }
            Op::MulCol { x, s } => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let cols = vx.cols.max(1);
                if self.rg(*x) {
                    let mut dx = g.data.clone();
                    for (row, &f) in dx.chunks_mut(cols).zip(&vs.data) {
                        row.iter_mut().for_each(|v| *v *= f);
                    }
                    send(grads, *x, Tensor::new(vx.rows, vx.cols, dx))?;
                }
                if self.rg(*s) {
                    let ds = g
                        .data
                        .chunks(cols)
                        .zip(vx.data.chunks(cols))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    send(grads, *s, Tensor::column(ds))?;
                }
            }
            Op::Scale { x, a } => send(grads, *x, g.map(|v| a * v))?,
            Op::AddScalar { x } => send(grads, *x, g)?,
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).cols;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(g.rows * c);
                        for r in 0..g.rows {
                            d.extend_from_slice(&g.row_slice(r)[start..start + c]);
                        }
                        send(grads, p, Tensor::new(g.rows, c, d))?;
                    }
                    start += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let v = self.value(p);
                    let n = v.len();
                    if self.rg(p) {
                        send(grads, p, Tensor::new(v.rows, v.cols, g.data[start..start + n].to_vec()))?;
                    }
                    start += n;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut d = vec![0.0; xv.len()];
                for r in 0..g.rows {
                    let dst = &mut d[r * xv.cols + start..r * xv.cols + start + g.cols];
                    dst.copy_from_slice(g.row_slice(r));
                }
                send(grads, *x, Tensor::new(xv.rows, xv.cols, d))?;
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let c = xv.cols;
                let mut d = vec![0.0; xv.len()];
                for (i, &src) in index.iter().enumerate() {
                    for (a, b) in d[src * c..(src + 1) * c].iter_mut().zip(g.row_slice(i)) {
                        *a += b;
                    }
                }
                send(grads, *x, Tensor::new(xv.rows, c, d))?;
            }
            Op::RepeatRows { x, times } => {
                let xv = self.value(*x);
                let c = xv.cols;
                let mut d = vec![0.0; xv.len()];
                for r in 0..xv.rows {
                    for t in 0..*times {
                        for (a, b) in d[r * c..(r + 1) * c].iter_mut().zip(g.row_slice(r * times + t)) {
                            *a += b;
                        }
                    }
                }
                send(grads, *x, Tensor::new(xv.rows, c, d))?;
            }
            Op::SegmentSum { x, seg } => {
                let xv = self.value(*x);
                let c = xv.cols;
                let mut d = Vec::with_capacity(xv.len());
                for r in 0..xv.rows {
                    d.extend_from_slice(g.row_slice(r / seg));
                }
                send(grads, *x, Tensor::new(xv.rows, c, d))?;
            }
            Op::SegmentExclusiveCumsum { x, seg } => {
                let xv = self.value(*x);
                let c = xv.cols;
                let mut d = vec![0.0; xv.len()];
                for grp in 0..xv.rows / seg {
                    let mut acc = vec![0.0; c];
                    for s in (0..*seg).rev() {
                        let r = grp * seg + s;
                        d[r * c..(r + 1) * c].copy_from_slice(&acc);
                        acc.iter_mut().zip(g.row_slice(r)).for_each(|(a, b)| *a += b);
                    }
                }
                send(grads, *x, Tensor::new(xv.rows, c, d))?;
            }
            Op::SegmentDiff { x, seg } => {
                let xv = self.value(*x);
                let c = xv.cols;
                let mut d = vec![0.0; xv.len()];
                for grp in 0..xv.rows / seg {
                    for s in 0..seg - 1 {
                        let gr = g.row_slice(grp * (seg - 1) + s);
                        let lo = (grp * seg + s) * c;
                        let hi = lo + c;
                        for j in 0..c {
                            d[lo + j] -= gr[j];
                            d[hi + j] += gr[j];
                        }
                    }
                }
                send(grads, *x, Tensor::new(xv.rows, c, d))?;
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                send(grads, *x, Tensor::new(xv.rows, xv.cols, vec![g.data[0]; xv.len()]))?;
            }
            Op::Encode { x, freqs } => {
                let xv = self.value(*x);
                let per = 2 * freqs;
                let mut d = vec![0.0; xv.len()];
                for (i, di) in d.iter_mut().enumerate() {
                    let (r, c) = (i / xv.cols, i % xv.cols);
                    let gr = &g.row_slice(r)[c * per..(c + 1) * per];
                    let ys = &value.row_slice(r)[c * per..(c + 1) * per];
                    let mut acc = 0.0;
                    let mut w = std::f64::consts::PI;
                    for k in 0..*freqs {
                        // d sin(wx) = w cos(wx), d cos(wx) = −w sin(wx)
                        acc += w * (gr[2 * k] * ys[2 * k + 1] - gr[2 * k + 1] * ys[2 * k]);
                        w *= 2.0;
                    }
                    *di = acc;
                }
                send(grads, *x, Tensor::new(xv.rows, xv.cols, d))?;
            }
            Op::Se3Act { xi, points } => {
                let tangent = TangentSE3::from_slice(&self.value(*xi).data);
                let pv = self.value(*points);
                if self.rg(*xi) {
                    let mut dxi = [0.0; 6];
                    for r in 0..pv.rows {
                        let p = Vector3::from_row_slice(pv.row_slice(r));
                        let jac = lie::action_jacobian(&tangent, &p);
                        let gr = g.row_slice(r);
                        for (k, d) in dxi.iter_mut().enumerate() {
                            *d += gr[0] * jac[(0, k)] + gr[1] * jac[(1, k)] + gr[2] * jac[(2, k)];
                        }
                    }
                    send(grads, *xi, Tensor::new(1, 6, dxi.to_vec()))?;
                }
                if self.rg(*points) {
                    let rt = lie::exp(&tangent).rotation.transpose();
                    let mut d = Vec::with_capacity(pv.len());
                    for r in 0..pv.rows {
                        let gp = rt * Vector3::from_row_slice(g.row_slice(r));
                        d.extend_from_slice(gp.as_slice());
                    }
                    send(grads, *points, Tensor::new(pv.rows, 3, d))?;
                }
            }
        }
        Ok(())
    }
}

/// Forward sinusoidal encoding shared by the tape op and the plain evaluator.
pub fn encode_tensor(x: &Tensor, freqs: usize) -> Tensor {
    let per = 2 * freqs;
    let mut data = Vec::with_capacity(x.len() * per);
    for &v in &x.data {
        let mut w = std::f64::consts::PI;
        for _ in 0..freqs {
            let (s, c) = (w * v).sin_cos();
            data.push(s);
            data.push(c);
            w *= 2.0;
        }
    }
    Tensor::new(x.rows, x.cols * per, data)
}

/// Result of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|)` over
    /// components whose magnitude exceeds the report's magnitude floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Component with the largest tolerance excess (see [`FdReport::passes`]).
    pub worst_index: usize,
    /// Worst `|a − n| / (rel_tol·max(|a|, |n|) + abs_floor)`; ≤ 1 passes.
    pub worst_excess: f64,
    /// Components whose stencil crossed a ReLU kink and were re-probed with a
    /// smaller step.
    pub refined: usize,
    pub checked: usize,
}

impl FdReport {
    pub fn passes(&self) -> bool {
        self.worst_excess <= 1.0
    }
}

/// Options for [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Components below this magnitude are excluded from `max_rel_error`.
    pub magnitude_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: 1e-4, rel_tol: 1e-4, abs_floor: 1e-7, magnitude_floor: 1e-6 }
    }
}

/// One deterministic evaluation of a loss for finite differencing.
pub struct FdEval {
    pub loss: f64,
    /// Piece identifier of a piecewise-smooth function (see [`Tape::kink_signature`]).
    pub signature: u64,
}

/// Compares `analytic` with central differences of `loss_fn` around `params`,
/// checking the components listed in `indices` (all when `None`).
///
/// When the two stencil points fall in a different smooth piece than the
/// centre, the step is halved (up to 40 times) until they agree, so the
/// central difference never straddles a ReLU kink.
pub fn finite_diff_check(
    mut loss_fn: impl FnMut(&[f64]) -> FdEval,
    params: &[f64],
    analytic: &[f64],
    indices: Option<&[usize]>,
    opts: FdOptions,
) -> FdReport {
    assert_eq!(params.len(), analytic.len(), "analytic gradient length");
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let centre = loss_fn(params).signature;
    let mut work = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        worst_excess: 0.0,
        refined: 0,
        checked: indices.len(),
    };
    for &i in indices {
        let mut h = opts.step;
        let mut numeric;
        let mut halvings = 0;
        loop {
            work[i] = params[i] + h;
            let plus = loss_fn(&work);
            work[i] = params[i] - h;
            let minus = loss_fn(&work);
            work[i] = params[i];
            numeric = (plus.loss - minus.loss) / (2.0 * h);
            let smooth = plus.signature == centre && minus.signature == centre;
            if smooth || halvings >= 40 {
                break;
            }
            h *= 0.5;
            halvings += 1;
        }
        if halvings > 0 {
            report.refined += 1;
        }
        let a = analytic[i];
        let diff = (a - numeric).abs();
        let mag = a.abs().max(numeric.abs());
        if mag > opts.magnitude_floor {
            report.max_rel_error = report.max_rel_error.max(diff / mag);
        }
        report.max_abs_error = report.max_abs_error.max(diff);
        let excess = diff / (opts.rel_tol * mag + opts.abs_floor);
        if excess > report.worst_excess {
            report.worst_excess = excess;
            report.worst_index = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Builds a loss touching every primitive and returns (tape, loss).
    fn all_ops_loss(params: &[f64]) -> (Tape, Var) {
        let mut t = Tape::new(params.len());
        let x = t.param(Tensor::new(4, 3, params[0..12].to_vec()), 0);
        let w = t.param(Tensor::new(3, 2, params[12..18].to_vec()), 12);
        let b = t.param(Tensor::new(1, 2, params[18..20].to_vec()), 18);
        let xi = t.param(Tensor::new(1, 6, params[20..26].to_vec()), 20);
        let moved = t.se3_act(xi, x);
        let h = t.affine(moved, w, Some(b));
        let a = t.sigmoid(h);
        let s = t.softplus(h);
        let e = t.exp(a);
        let sn = t.sin(s);
        let cs = t.cos(h);
        let lg = t.add_scalar(e, 0.5);
        let lg = t.ln(lg);
        let m = t.mul(sn, lg);
        let m = t.sub(m, cs);
        let r = t.relu(h);
        let m = t.add(m, r);
        let enc = t.encode(m, 2);
        let cat = t.concat_cols(&[enc, m]);
        let sl = t.slice_cols(cat, 3, 5);
        let col = t.slice_cols(sl, 0, 1);
        let mc = t.mul_col(sl, col);
        let cum = t.segment_exclusive_cumsum(mc, 2);
        let ss = t.segment_sum(cum, 2);
        let rep = t.repeat_rows(ss, 2);
        let g = t.gather(rep, vec![3, 0, 1, 1]);
        let both = t.concat_rows(&[g, mc]);
        let d = t.segment_diff(both, 4);
        let sq = t.mul(d, d);
        let sc = t.scale(sq, 0.7);
        let loss = t.mean(sc);
        (t, loss)
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: Vec<f64> = (0..26).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let (tape, loss) = all_ops_loss(&params);
        let grad = tape.backward(loss).unwrap();
        let report = finite_diff_check(
            |p| {
                let (t, l) = all_ops_loss(p);
                FdEval { loss: t.scalar(l), signature: t.kink_signature() }
            },
            &params,
            &grad,
            None,
            FdOptions { step: 1e-5, rel_tol: 1e-6, abs_floor: 1e-10, magnitude_floor: 1e-8 },
        );
        assert!(report.passes(), "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut t = Tape::new(3);
        let p = t.param(Tensor::row(vec![1.0, 2.0, 3.0]), 0);
        let c = t.constant(Tensor::scalar(4.0));
        let zero = t.scale(p, 0.0);
        let s = t.sum(zero);
        let loss = t.add(s, c);
        assert_eq!(t.backward(loss).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn untouched_parameters_get_zero() {
        let mut t = Tape::new(4);
        let a = t.param(Tensor::row(vec![1.0, 2.0]), 0);
        let _unused = t.param(Tensor::row(vec![5.0, 6.0]), 2);
        let sq = t.mul(a, a);
        let loss = t.sum(sq);
        assert_eq!(t.backward(loss).unwrap(), vec![2.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn translation_increment_gradient_is_twice_translation() {
        // loss = ‖exp(xi)·0‖² with base translation t folded into the point.
        let t0 = [0.3, -1.5, 2.0];
        let mut t = Tape::new(6);
        let xi = t.param(Tensor::zeros(1, 6), 0);
        let origin = t.constant(Tensor::row(t0.to_vec()));
        let moved = t.se3_act(xi, origin);
        let sq = t.mul(moved, moved);
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        for k in 0..3 {
            assert!((g[3 + k] - 2.0 * t0[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xv = random(8, 5, &mut rng);
        let wv = random(5, 3, &mut rng);
        let mut t = Tape::new(15);
        let x = t.constant(xv);
        let w = t.param(wv, 0);
        let h = t.affine(x, w, None);
        let s = t.sigmoid(h);
        let l1 = t.sum(s);
        let sq = t.mul(h, h);
        let l2 = t.mean(sq);
        let a = t.scale(l1, 2.5);
        let b = t.scale(l2, -0.75);
        let combo = t.add(a, b);
        let g1 = t.backward(l1).unwrap();
        let g2 = t.backward(l2).unwrap();
        let gc = t.backward(combo).unwrap();
        for i in 0..15 {
            assert!((gc[i] - (2.5 * g1[i] - 0.75 * g2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_primitive() {
        let mut t = Tape::new(1);
        let p = t.param(Tensor::scalar(0.0), 0);
        let l = t.ln(p);
        let err = t.backward(l).unwrap_err();
        assert!(err.to_string().contains("ln"), "{err}");
    }

    #[test]
    fn quadratic_fd_check_is_tight() {
        let params = vec![0.5, -1.25, 2.0];
        let analytic: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
        let r = finite_diff_check(
            |p| FdEval { loss: p.iter().map(|x| x * x).sum(), signature: 0 },
            &params,
            &analytic,
            None,
            FdOptions { step: 1e-4, ..Default::default() },
        );
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!(r.passes());
    }

    #[test]
    fn fd_check_steps_around_relu_kinks() {
        // f(x) = relu(x − 0.3); a unit step straddles the kink at 0.3.
        let params = vec![0.29];
        let r = finite_diff_check(
            |p| {
                let mut t = Tape::new(1);
                let x = t.param(Tensor::scalar(p[0]), 0);
                let s = t.add_scalar(x, -0.3);
                let y = t.relu(s);
                FdEval { loss: t.scalar(y), signature: t.kink_signature() }
            },
            &params,
            &[0.0],
            None,
            FdOptions { step: 0.05, ..Default::default() },
        );
        assert_eq!(r.refined, 1);
        assert!(r.passes(), "{r:?}");
    }

    #[test]
    fn encode_layout_is_sin_cos_per_frequency() {
        let e = encode_tensor(&Tensor::row(vec![0.25, 0.0]), 2);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let want = [h, h, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        for (a, b) in e.data.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{:?}", e.data);
        }
    }
}
