//! Define-by-run tape with reverse-mode adjoints.
//!
//! Every primitive appends one node holding its value and the operand
//! indices needed to replay its adjoint. Backward passes never mutate the
//! tape, so several seeded passes may run against the same recording.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{DiffError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Tanh,
    Square,
    Recip,
    Neg,
    Abs,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sqrt => x.sqrt(),
            Unary::Tanh => x.tanh(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
            Unary::Neg => -x,
            Unary::Abs => x.abs(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            // subgradient at the kink is 0
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
            Unary::Neg => -1.0,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Max(usize, usize),
    AddRow(usize, usize),
    MulRowScalar(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    BlockLeftMul { mat: Arc<Tensor>, x: usize },
    Unary(usize, Unary),
    SoftmaxRows(usize),
    ConcatCols(usize, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    GatherRows(usize, Arc<Vec<Option<usize>>>),
    Reshape(usize),
    Transpose(usize),
    Cdist(usize, usize),
    Huber(usize, f64),
    CausalConv { x: usize, w: usize, dilation: usize },
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Max(a, b)
            | Op::AddRow(a, b)
            | Op::MulRowScalar(a, b)
            | Op::MatMul(a, b)
            | Op::BatchMatMul { a, b, .. }
            | Op::ConcatCols(a, b)
            | Op::Cdist(a, b)
            | Op::CausalConv { x: a, w: b, .. } => [Some(a), Some(b)],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::BlockLeftMul { x: a, .. }
            | Op::Unary(a, _)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Huber(a, _) => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by a backward pass, keyed by tape position.
///
/// Only values that require gradients and were reached by the pass are
/// present.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A single forward recording. Confined to one thread of execution.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "value recorded on a different tape");
        &self.nodes[v.index]
    }

    fn rg(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa == sb,
            "{op}: shape mismatch {sa:?} vs {sb:?}",
        );
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        self.zip(a, b, Op::Add(a.index, b.index), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        self.zip(a, b, Op::Sub(a.index, b.index), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        self.zip(a, b, Op::Mul(a.index, b.index), |x, y| x * y)
    }

    /// Elementwise maximum; ties route the adjoint to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("maximum", a, b);
        self.zip(a, b, Op::Max(a.index, b.index), f64::max)
    }

    /// `x[r, c] + bias[c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(bias);
        let c = vx.cols();
        assert_eq!(vb.len(), c, "add_row: bias width {} vs {}", vb.len(), c);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (d, b) in row.iter_mut().zip(vb.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape");
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddRow(x.index, bias.index), rg)
    }

    /// `x[r, c] * s[r]`.
    pub fn mul_row_scalar(&mut self, x: Var, s: Var) -> Var {
        let vx = self.value(x);
        let vs = self.value(s);
        let c = vx.cols();
        assert_eq!(vs.len(), vx.rows(), "mul_row_scalar: {} scalars for {} rows", vs.len(), vx.rows());
        let mut data = vx.data().to_vec();
        for (row, k) in data.chunks_mut(c).zip(vs.data()) {
            for d in row.iter_mut() {
                *d *= k;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape");
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::MulRowScalar(x.index, s.index), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x.index, k), rg)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v + k);
        let rg = self.rg(x);
        self.push(value, Op::Shift(x.index), rg)
    }

    /// `a[.., K] · b[K, N]`, treating `a` as a stack of rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(vb.shape().len(), 2, "matmul: rhs must be a matrix");
        let (k, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(va.cols(), k, "matmul: inner dims {} vs {}", va.cols(), k);
        let m = va.rows();
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let mut shape = va.shape().to_vec();
        if shape.is_empty() {
            shape.push(n);
        } else {
            *shape.last_mut().unwrap() = n;
        }
        let value = Tensor::new(shape, out).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a.index, b.index), rg)
    }

    /// Batched product `a[B, M, K] · b[B, K, N]` (or `b[B, N, K]ᵀ`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert!(va.shape().len() == 3 && vb.shape().len() == 3, "batch_matmul: rank-3 operands");
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let n = if trans_b {
            assert_eq!(vb.shape()[2], k, "batch_matmul: inner dims");
            vb.shape()[1]
        } else {
            assert_eq!(vb.shape()[1], k, "batch_matmul: inner dims");
            vb.shape()[2]
        };
        assert_eq!(vb.shape()[0], bs, "batch_matmul: batch sizes");
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let ab = &va.data()[i * m * k..(i + 1) * m * k];
            let bb = &vb.data()[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                matmul_bt_into(ab, bb, ob, m, k, n);
            } else {
                matmul_into(ab, bb, ob, m, k, n);
            }
        }
        let value = Tensor::new(vec![bs, m, n], out).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(
            value,
            Op::BatchMatMul {
                a: a.index,
                b: b.index,
                trans_b,
            },
            rg,
        )
    }

    /// Applies a constant `mat[P, K]` to every consecutive block of `K` rows
    /// of `x`, producing blocks of `P` rows.
    pub fn block_left_mul(&mut self, mat: Arc<Tensor>, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(mat.shape().len(), 2, "block_left_mul: matrix operand");
        let (p, k) = (mat.shape()[0], mat.shape()[1]);
        let c = vx.cols();
        let rows = vx.rows();
        assert!(k > 0 && rows % k == 0, "block_left_mul: {rows} rows not divisible by {k}");
        let blocks = rows / k;
        let mut out = vec![0.0; blocks * p * c];
        for b in 0..blocks {
            let xb = &vx.data()[b * k * c..(b + 1) * k * c];
            let ob = &mut out[b * p * c..(b + 1) * p * c];
            matmul_into(mat.data(), xb, ob, p, k, c);
        }
        let value = Tensor::new(vec![blocks * p, c], out).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::BlockLeftMul { mat, x: x.index }, rg)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let value = self.value(x).map(|v| f.apply(v));
        let rg = self.rg(x);
        self.push(value, Op::Unary(x.index, f), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
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

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Row-wise softmax over the trailing axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x.index), rg)
    }

    /// Concatenates along the trailing axis; row counts must agree.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.rows(), vb.rows(), "concat_cols: row counts");
        let (ca, cb) = (va.cols(), vb.cols());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(shape, data).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a.index, b.index), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x.index), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x.index), rg)
    }

    /// `[R, C] -> [C]`, summing over rows.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut out = vec![0.0; c];
        for row in vx.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let value = Tensor::vector(out);
        let rg = self.rg(x);
        self.push(value, Op::SumRows(x.index), rg)
    }

    /// `[R, C] -> [R]`, summing each row.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.data().chunks(vx.cols()).map(|r| r.iter().sum()).collect();
        let value = Tensor::vector(out);
        let rg = self.rg(x);
        self.push(value, Op::SumCols(x.index), rg)
    }

    /// Row gather: output row `i` is input row `idx[i]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<Option<usize>>>) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let rows = vx.rows();
        let mut data = vec![0.0; idx.len() * c];
        for (i, src) in idx.iter().enumerate() {
            if let Some(s) = *src {
                assert!(s < rows, "gather_rows: row {s} out of {rows}");
                data[i * c..(i + 1) * c].copy_from_slice(vx.row(s));
            }
        }
        let value = Tensor::new(vec![idx.len(), c], data).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::GatherRows(x.index, idx), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshaped(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x.index), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = vx.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x.index), rg)
    }

    /// Pairwise Euclidean distances between rows of `a[P, K]` and `b[Q, K]`.
    pub fn cdist(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let k = va.cols();
        assert_eq!(vb.cols(), k, "cdist: feature widths");
        let (p, q) = (va.rows(), vb.rows());
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            let ra = va.row(i);
            for j in 0..q {
                let rb = vb.row(j);
                let s: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
                out[i * q + j] = s.sqrt();
            }
        }
        let value = Tensor::new(vec![p, q], out).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Cdist(a.index, b.index), rg)
    }

    /// Elementwise Huber penalty: `½r²` inside `delta`, `delta(|r| − ½delta)` outside.
    pub fn huber(&mut self, x: Var, delta: f64) -> Var {
        let value = self.value(x).map(|r| huber_scalar(r, delta));
        let rg = self.rg(x);
        self.push(value, Op::Huber(x.index, delta), rg)
    }

    /// Causal dilated convolution along the leading axis.
    ///
    /// `x` is `[T, N, Cin]`, `w` is `[K, Cin, Cout]`; tap `j` reads time
    /// `t − j·dilation`, and reads before the start are zero.
    pub fn causal_conv(&mut self, x: Var, w: Var, dilation: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vx.shape().len(), 3, "causal_conv: x must be [T, N, C]");
        assert_eq!(vw.shape().len(), 3, "causal_conv: w must be [K, Cin, Cout]");
        let (t_len, n, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (k, wcin, cout) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        assert_eq!(wcin, cin, "causal_conv: channel mismatch");
        let mut out = vec![0.0; t_len * n * cout];
        for j in 0..k {
            let lag = j * dilation;
            let wj = &vw.data()[j * cin * cout..(j + 1) * cin * cout];
            for t in lag..t_len {
                let src = &vx.data()[(t - lag) * n * cin..(t - lag + 1) * n * cin];
                let dst = &mut out[t * n * cout..(t + 1) * n * cout];
                matmul_acc(src, wj, dst, n, cin, cout);
            }
        }
        let value = Tensor::new(vec![t_len, n, cout], out).expect("shape");
        let rg = self.rg(x) || self.rg(w);
        self.push(
            value,
            Op::CausalConv {
                x: x.index,
                w: w.index,
                dilation,
            },
            rg,
        )
    }

    /// Adjoints of every node reachable backwards from `root`.
    /// Marks values that require a gradient and, when `wrt` is given, lie
    /// on a path to one of its entries. Adjoints of other values are never
    /// formed.
    fn live_mask(&self, root: usize, wrt: Option<&[Var]>) -> Vec<bool> {
        let mut live: Vec<bool> = self.nodes[..=root].iter().map(|n| n.requires_grad).collect();
        if let Some(wrt) = wrt {
            let mut target = vec![false; root + 1];
            for v in wrt {
                if v.index <= root {
                    target[v.index] = true;
                }
            }
            for i in 0..=root {
                let feeds = target[i] || self.nodes[i].op.inputs().iter().flatten().any(|&j| live[j]);
                live[i] = live[i] && feeds;
            }
        }
        live
    }

    fn backprop(&self, root: usize, seed: Vec<f64>, wrt: Option<&[Var]>) -> Vec<Option<Vec<f64>>> {
        let live = self.live_mask(root, wrt);
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        adj[root] = Some(seed);
        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !live[i] {
                continue;
            }
            self.propagate(&self.nodes[i], &g, &mut adj, &live);
            adj[i] = Some(g);
        }
        adj
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>], live: &[bool]) {
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| live[j];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(adj, *a, g.len(), |d| add_into(d, g));
                }
                if wants(*b) {
                    acc(adj, *b, g.len(), |d| add_into(d, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(adj, *a, g.len(), |d| add_into(d, g));
                }
                if wants(*b) {
                    acc(adj, *b, g.len(), |d| {
                        for (x, y) in d.iter_mut().zip(g) {
                            *x -= y;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(adj, *a, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * vb[i];
                        }
                    });
                }
                if wants(*b) {
                    acc(adj, *b, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * va[i];
                        }
                    });
                }
            }
            Op::Max(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(adj, *a, g.len(), |d| {
                        for i in 0..d.len() {
                            if va[i] >= vb[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(adj, *b, g.len(), |d| {
                        for i in 0..d.len() {
                            if va[i] < vb[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                let c = val(*bias).len();
                if wants(*x) {
                    acc(adj, *x, g.len(), |d| add_into(d, g));
                }
                if wants(*bias) {
                    acc(adj, *bias, c, |d| {
                        for row in g.chunks(c) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::MulRowScalar(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let c = vx.cols();
                if wants(*x) {
                    acc(adj, *x, g.len(), |d| {
                        for (r, (drow, grow)) in d.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                            let k = vs.data()[r];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += gv * k;
                            }
                        }
                    });
                }
                if wants(*s) {
                    acc(adj, *s, vs.len(), |d| {
                        for (r, (xrow, grow)) in vx.data().chunks(c).zip(g.chunks(c)).enumerate() {
                            d[r] += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
            }
            Op::Scale(x, k) => {
                if wants(*x) {
                    acc(adj, *x, g.len(), |d| {
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv * k;
                        }
                    });
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                if wants(*x) {
                    acc(adj, *x, g.len(), |d| add_into(d, g));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.rows();
                if wants(*a) {
                    // dA = G · Bᵀ
                    acc(adj, *a, m * k, |d| matmul_bt_acc(g, vb.data(), d, m, n, k));
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    acc(adj, *b, k * n, |d| matmul_at_acc(va.data(), g, d, m, k, n));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = if *trans_b { vb.shape()[1] } else { vb.shape()[2] };
                if wants(*a) {
                    acc(adj, *a, bs * m * k, |d| {
                        for i in 0..bs {
                            let gb = &g[i * m * n..(i + 1) * m * n];
                            let bb = &vb.data()[i * k * n..(i + 1) * k * n];
                            let db = &mut d[i * m * k..(i + 1) * m * k];
                            if *trans_b {
                                // B stored [n, k]: dA = G · B
                                matmul_acc(gb, bb, db, m, n, k);
                            } else {
                                matmul_bt_acc(gb, bb, db, m, n, k);
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(adj, *b, bs * k * n, |d| {
                        for i in 0..bs {
                            let gb = &g[i * m * n..(i + 1) * m * n];
                            let ab = &va.data()[i * m * k..(i + 1) * m * k];
                            let db = &mut d[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                // dB[n, k] = Gᵀ · A
                                matmul_at_acc(gb, ab, db, m, n, k);
                            } else {
                                matmul_at_acc(ab, gb, db, m, k, n);
                            }
                        }
                    });
                }
            }
            Op::BlockLeftMul { mat, x } => {
                if wants(*x) {
                    let vx = val(*x);
                    let (p, k) = (mat.shape()[0], mat.shape()[1]);
                    let c = vx.cols();
                    let blocks = vx.rows() / k;
                    acc(adj, *x, vx.len(), |d| {
                        for b in 0..blocks {
                            let gb = &g[b * p * c..(b + 1) * p * c];
                            let db = &mut d[b * k * c..(b + 1) * k * c];
                            matmul_at_acc(mat.data(), gb, db, p, k, c);
                        }
                    });
                }
            }
            Op::Unary(x, f) => {
                if wants(*x) {
                    let vx = val(*x).data();
                    let vy = node.value.data();
                    acc(adj, *x, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * f.derivative(vx[i], vy[i]);
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let y = &node.value;
                    let c = y.cols();
                    acc(adj, *x, g.len(), |d| {
                        for ((drow, grow), yrow) in
                            d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                drow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).cols(), val(*b).cols());
                let w = ca + cb;
                if wants(*a) {
                    acc(adj, *a, val(*a).len(), |d| {
                        for (drow, grow) in d.chunks_mut(ca).zip(g.chunks(w)) {
                            add_into(drow, &grow[..ca]);
                        }
                    });
                }
                if wants(*b) {
                    acc(adj, *b, val(*b).len(), |d| {
                        for (drow, grow) in d.chunks_mut(cb).zip(g.chunks(w)) {
                            add_into(drow, &grow[ca..]);
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc(adj, *x, val(*x).len(), |d| d.iter_mut().for_each(|v| *v += g[0]));
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).len();
                    let s = g[0] / n as f64;
                    acc(adj, *x, n, |d| d.iter_mut().for_each(|v| *v += s));
                }
            }
            Op::SumRows(x) => {
                if wants(*x) {
                    let c = g.len();
                    acc(adj, *x, val(*x).len(), |d| {
                        for row in d.chunks_mut(c) {
                            add_into(row, g);
                        }
                    });
                }
            }
            Op::SumCols(x) => {
                if wants(*x) {
                    let c = val(*x).cols();
                    acc(adj, *x, val(*x).len(), |d| {
                        for (row, gv) in d.chunks_mut(c).zip(g) {
                            row.iter_mut().for_each(|v| *v += gv);
                        }
                    });
                }
            }
            Op::GatherRows(x, idx) => {
                if wants(*x) {
                    let c = val(*x).cols();
                    acc(adj, *x, val(*x).len(), |d| {
                        for (i, src) in idx.iter().enumerate() {
                            if let Some(s) = *src {
                                add_into(&mut d[s * c..(s + 1) * c], &g[i * c..(i + 1) * c]);
                            }
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let vx = val(*x);
                    let (r, c) = (vx.rows(), vx.cols());
                    acc(adj, *x, r * c, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::Cdist(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let k = va.cols();
                let (p, q) = (va.rows(), vb.rows());
                let dist = node.value.data();
                // d dist_ij / d a_i = (a_i − b_j) / dist_ij, zero at coincidence
                let coef = |i: usize, j: usize| {
                    let dd = dist[i * q + j];
                    if dd > 0.0 {
                        g[i * q + j] / dd
                    } else {
                        0.0
                    }
                };
                if wants(*a) {
                    acc(adj, *a, p * k, |d| {
                        for i in 0..p {
                            for j in 0..q {
                                let w = coef(i, j);
                                if w == 0.0 {
                                    continue;
                                }
                                for t in 0..k {
                                    d[i * k + t] += w * (va.at2(i, t) - vb.at2(j, t));
                                }
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(adj, *b, q * k, |d| {
                        for i in 0..p {
                            for j in 0..q {
                                let w = coef(i, j);
                                if w == 0.0 {
                                    continue;
                                }
                                for t in 0..k {
                                    d[j * k + t] -= w * (va.at2(i, t) - vb.at2(j, t));
                                }
                            }
                        }
                    });
                }
            }
            Op::Huber(x, delta) => {
                if wants(*x) {
                    let vx = val(*x).data();
                    acc(adj, *x, g.len(), |d| {
                        for i in 0..d.len() {
                            let r = vx[i];
                            let slope = if r.abs() <= *delta { r } else { delta * r.signum() };
                            d[i] += g[i] * slope;
                        }
                    });
                }
            }
            Op::CausalConv { x, w, dilation } => {
                let (vx, vw) = (val(*x), val(*w));
                let (t_len, n, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (k, _, cout) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
                if wants(*x) {
                    acc(adj, *x, vx.len(), |d| {
                        for j in 0..k {
                            let lag = j * dilation;
                            let wj = &vw.data()[j * cin * cout..(j + 1) * cin * cout];
                            for t in lag..t_len {
                                let gt = &g[t * n * cout..(t + 1) * n * cout];
                                let dt = &mut d[(t - lag) * n * cin..(t - lag + 1) * n * cin];
                                matmul_bt_acc(gt, wj, dt, n, cout, cin);
                            }
                        }
                    });
                }
                if wants(*w) {
                    acc(adj, *w, vw.len(), |d| {
                        for j in 0..k {
                            let lag = j * dilation;
                            let dj = &mut d[j * cin * cout..(j + 1) * cin * cout];
                            for t in lag..t_len {
                                let xs = &vx.data()[(t - lag) * n * cin..(t - lag + 1) * n * cin];
                                let gt = &g[t * n * cout..(t + 1) * n * cout];
                                matmul_at_acc(xs, gt, dj, n, cin, cout);
                            }
                        }
                    });
                }
            }
        }
    }

    fn check_wrt(&self, wrt: &[Var]) -> Result<(), DiffError> {
        for (position, v) in wrt.iter().enumerate() {
            if !self.owns(*v) || !self.nodes[v.index].requires_grad {
                return Err(DiffError::DetachedInput { position });
            }
        }
        Ok(())
    }

    fn collect(&self, adj: &[Option<Vec<f64>>], wrt: &[Var]) -> Vec<Tensor> {
        wrt.iter()
            .map(|v| {
                let shape = self.nodes[v.index].value.shape().to_vec();
                match adj.get(v.index).and_then(|a| a.as_ref()) {
                    Some(g) => Tensor::new(shape, g.clone()).expect("adjoint shape"),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect()
    }

    /// Gradients of a scalar output with respect to `wrt`.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>, DiffError> {
        let out = self.scalar_output(output)?;
        self.check_wrt(wrt)?;
        let adj = self.backprop(out, vec![1.0], Some(wrt));
        Ok(self.collect(&adj, wrt))
    }

    /// Vector–Jacobian product `seedᵀ · ∂output/∂wrt[i]`.
    pub fn seeded_grad(
        &self,
        output: Var,
        seed: &Tensor,
        wrt: &[Var],
    ) -> Result<Vec<Tensor>, DiffError> {
        if !self.owns(output) {
            return Err(DiffError::DetachedInput { position: usize::MAX });
        }
        let shape = self.nodes[output.index].value.shape();
        if shape != seed.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "seeded_grad",
                expected: shape.to_vec(),
                found: seed.shape().to_vec(),
            });
        }
        self.check_wrt(wrt)?;
        let adj = self.backprop(output.index, seed.data().to_vec(), Some(wrt));
        Ok(self.collect(&adj, wrt))
    }

    /// Full backward pass from a scalar; returns gradients for every
    /// gradient-requiring value reached.
    pub fn backward(&self, output: Var) -> Result<Gradients, DiffError> {
        let out = self.scalar_output(output)?;
        let adj = self.backprop(out, vec![1.0], None);
        let mut grads = HashMap::new();
        for (i, a) in adj.into_iter().enumerate() {
            if let Some(g) = a {
                let node = &self.nodes[i];
                if node.requires_grad {
                    let t = Tensor::new(node.value.shape().to_vec(), g).expect("adjoint shape");
                    grads.insert(i, t);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn scalar_output(&self, output: Var) -> Result<usize, DiffError> {
        if !self.owns(output) {
            return Err(DiffError::DetachedInput { position: usize::MAX });
        }
        let len = self.nodes[output.index].value.len();
        if len != 1 {
            return Err(DiffError::NonScalarOutput { len });
        }
        Ok(output.index)
    }
}

pub(crate) fn huber_scalar(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], j: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[j].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (x, y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

/// `out[m, n] = a[m, k] · b[k, n]`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    matmul_acc(a, b, out, m, k, n);
}

/// `out[m, n] += a[m, k] · b[k, n]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] = a[m, k] · b[n, k]ᵀ`.
fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    matmul_bt_acc(a, b, out, m, k, n);
}

/// `out[m, n] += a[m, k] · b[n, k]ᵀ`.
fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_acc(a, &bt, out, m, k, n);
}

/// `out[k, n] += a[m, k]ᵀ · b[m, n]`.
fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
