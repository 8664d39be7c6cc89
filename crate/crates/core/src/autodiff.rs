//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and, when any input
//! needs a gradient, enough information to run the adjoint. A tape built
//! with [`Tape::no_grad`] only evaluates values. Stop-gradient is
//! [`Tape::detach`]: the result is a fresh constant leaf.

use std::collections::HashMap;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    DivRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Square(Var),
    Softplus(Var),
    MaxScalar(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Bmm { a: Var, b: Var, ta: bool, tb: bool, dims: [usize; 4] },
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
    LogSoftmax(Var),
    Softmax(Var),
    RmsNorm { x: Var, scale: Var, eps: f64 },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    WhereRows { mask: Vec<bool>, a: Var, b: Var },
    StraightThrough(Var),
    Permute0213 { x: Var, dims: [usize; 4] },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    Diag(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<(u64, usize), usize>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::input`] or [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.params.get(&(store.tag(), id.0)).and_then(|&i| self.grads[i].as_ref())
    }

    /// One gradient per parameter of `store`, zero where the parameter was unused.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| self.param(store, id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
    record: bool,
    detached: DetachLog,
}

/// Optional log of stop-gradient values, so a later evaluation can hold
/// them fixed (finite differences of a surrogate loss).
#[derive(Default)]
enum DetachLog {
    #[default]
    Off,
    Record(Vec<Tensor>),
    Replay(std::collections::VecDeque<Tensor>),
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), record: true, detached: DetachLog::Off }
    }

    /// A tape that evaluates values only.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), record: false, detached: DetachLog::Off }
    }

    /// Keeps a copy of every value passed through [`Tape::detach`].
    pub fn recording_detached(mut self) -> Self {
        self.detached = DetachLog::Record(Vec::new());
        self
    }

    /// Makes [`Tape::detach`] return `values` in order instead of its input.
    pub fn replaying_detached(mut self, values: Vec<Tensor>) -> Self {
        self.detached = DetachLog::Replay(values.into());
        self
    }

    pub fn take_detached(&mut self) -> Vec<Tensor> {
        match std::mem::take(&mut self.detached) {
            DetachLog::Record(v) => v,
            DetachLog::Replay(v) => v.into(),
            DetachLog::Off => Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
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
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.record && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        let needs_grad = self.record;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Registers (once per tape) a parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.input(store.get(id).clone());
        self.params.insert(key, v);
        v
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = match &mut self.detached {
            DetachLog::Off => self.value(v).clone(),
            DetachLog::Record(log) => {
                let value = self.nodes[v.0].value.clone();
                log.push(value.clone());
                value
            }
            DetachLog::Replay(queue) => {
                let value = queue.pop_front().expect("replayed graph detaches more values than recorded");
                assert_eq!(value.shape(), self.nodes[v.0].value.shape(), "replayed detach shape differs");
                value
            }
        };
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.len(), y.len(), "shape mismatch {:?} vs {:?}", x.shape(), y.shape());
        Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    fn row_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let c = x.cols();
        assert_eq!(y.len(), c, "row operand {:?} does not match {:?}", y.shape(), x.shape());
        let data = x.data().chunks(c).flat_map(|row| row.iter().zip(y.data()).map(|(&p, &q)| f(p, q))).collect();
        Tensor::new(x.shape(), data)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.value(a).map(f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p / q);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    /// Adds a `[cols]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.row_binary(a, b, |p, q| p + q);
        self.push(v, Op::AddRow(a, b), &[a, b])
    }

    pub fn sub_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.row_binary(a, b, |p, q| p - q);
        self.push(v, Op::SubRow(a, b), &[a, b])
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.row_binary(a, b, |p, q| p * q);
        self.push(v, Op::MulRow(a, b), &[a, b])
    }

    pub fn div_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.row_binary(a, b, |p, q| p / q);
        self.push(v, Op::DivRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.unary(a, |x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.unary(a, |x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::ln);
        self.push(v, Op::Ln(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.unary(a, sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.unary(a, softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn max_scalar(&mut self, a: Var, floor: f64) -> Var {
        let v = self.unary(a, |x| x.max(floor));
        self.push(v, Op::MaxScalar(a, floor), &[a])
    }

    /// 2D product `op(a) * op(b)`; see [`kernels::gemm`] for layouts.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = if ta { (x.cols(), x.rows()) } else { (x.rows(), x.cols()) };
        let (k2, n) = if tb { (y.cols(), y.rows()) } else { (y.rows(), y.cols()) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", x.shape(), y.shape());
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, x.data(), ta, y.data(), tb, &mut out, 0.0);
        self.push(Tensor::new(&[m, n], out), Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        self.push(Tensor::new(&[c, r], out), Op::Transpose(a), &[a])
    }

    /// Batched product over `[g, .., ..]` operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.shape().len() == 3 && y.shape().len() == 3, "bmm expects 3D operands");
        let g = x.shape()[0];
        assert_eq!(g, y.shape()[0]);
        let (m, k) = if ta { (x.shape()[2], x.shape()[1]) } else { (x.shape()[1], x.shape()[2]) };
        let (k2, n) = if tb { (y.shape()[2], y.shape()[1]) } else { (y.shape()[1], y.shape()[2]) };
        assert_eq!(k, k2, "bmm inner dims {:?} x {:?}", x.shape(), y.shape());
        let mut out = vec![0.0; g * m * n];
        kernels::batched_gemm(g, m, k, n, x.data(), ta, y.data(), tb, &mut out, 0.0);
        self.push(Tensor::new(&[g, m, n], out), Op::Bmm { a, b, ta, tb, dims: [g, m, k, n] }, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums the last axis: `[rows, cols] -> [rows, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data: Vec<f64> = x.data().chunks(x.cols()).map(|r| r.iter().sum()).collect();
        let rows = data.len();
        self.push(Tensor::new(&[rows, 1], data), Op::SumCols(a), &[a])
    }

    /// Sums over rows: `[rows, cols] -> [1, cols]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = vec![0.0; c];
        for row in x.data().chunks(c) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        self.push(Tensor::new(&[1, c], data), Op::SumRows(a), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let r = self.value(a).rows() as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::new(x.shape(), kernels::log_softmax_rows(x.data(), x.cols()));
        self.push(v, Op::LogSoftmax(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::new(x.shape(), kernels::softmax_rows(x.data(), x.cols(), false));
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Softmax over `[.., t, t]` score blocks where query `i` sees keys `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.shape();
        assert!(s.len() >= 2 && s[s.len() - 1] == s[s.len() - 2], "causal softmax needs square blocks");
        let v = Tensor::new(x.shape(), kernels::softmax_rows(x.data(), x.cols(), true));
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Root-mean-square normalisation over the last axis with a learned `[cols]` scale.
    pub fn rms_norm(&mut self, a: Var, scale: Var, eps: f64) -> Var {
        let (x, s) = (self.value(a), self.value(scale));
        let c = x.cols();
        assert_eq!(s.len(), c);
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let r = 1.0 / (ms + eps).sqrt();
            out.extend(row.iter().zip(s.data()).map(|(v, g)| v * r * g));
        }
        let v = Tensor::new(x.shape(), out);
        self.push(v, Op::RmsNorm { x: a, scale, eps }, &[a, scale])
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), rows, "concat row mismatch");
                out.extend_from_slice(t.row(r));
            }
        }
        self.push(Tensor::new(&[rows, total], out), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let c = x.cols();
        assert!(start + len <= c);
        let out: Vec<f64> = x.data().chunks(c).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let rows = x.rows();
        self.push(Tensor::new(&[rows, len], out), Op::SliceCols { x: a, start }, &[a])
    }

    /// Stacks along the first axis; trailing sizes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), c, "concat_rows col mismatch");
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / c.max(1);
        self.push(Tensor::new(&[rows, c], out), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Selects rows (of the `rows x cols` view); gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_rows(idx);
        self.push(v, Op::GatherRows { x: a, idx: idx.to_vec() }, &[a])
    }

    /// Row-wise select: `mask[r] ? a[r] : b[r]`. `a` may be a single row broadcast to all.
    pub fn where_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols());
        assert_eq!(mask.len(), y.rows());
        assert!(x.rows() == 1 || x.rows() == y.rows());
        let mut out = Vec::with_capacity(y.len());
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.extend_from_slice(x.row(if x.rows() == 1 { 0 } else { r }));
            } else {
                out.extend_from_slice(y.row(r));
            }
        }
        let v = Tensor::new(y.shape(), out);
        self.push(v, Op::WhereRows { mask: mask.to_vec(), a, b }, &[a, b])
    }

    /// Forward value is exactly `sample`; the gradient passes unchanged to `probs`.
    pub fn straight_through(&mut self, sample: Tensor, probs: Var) -> Var {
        assert_eq!(sample.len(), self.value(probs).len());
        let sample = sample.reshape(self.shape(probs));
        self.push(sample, Op::StraightThrough(probs), &[probs])
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn permute_0213(&mut self, x: Var, dims: [usize; 4]) -> Var {
        let v = permute_0213(self.value(x).data(), dims);
        let [a, b, c, d] = dims;
        self.push(Tensor::new(&[a, c, b, d], v), Op::Permute0213 { x, dims }, &[x])
    }

    /// NHWC convolution; `w` is `[k * k * c_in, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects NHWC input");
        let geom = ConvGeom { batch: xs[0], height: xs[1], width: xs[2], channels: xs[3], kernel, stride, pad };
        let wt = self.value(w);
        assert_eq!(wt.rows(), geom.patch_len(), "conv weight rows");
        let cout = wt.cols();
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let rows = geom.batch * geom.positions();
        let mut out = vec![0.0; rows * cout];
        kernels::gemm(rows, geom.patch_len(), cout, &cols, false, self.value(w).data(), false, &mut out, 0.0);
        let v = Tensor::new(&[geom.batch, geom.out_height(), geom.out_width(), cout], out);
        let keep = if self.record && (self.needs_grad(x) || self.needs_grad(w)) { cols } else { Vec::new() };
        self.push(v, Op::Conv2d { x, w, geom, cols: keep }, &[x, w])
    }

    /// Transposed NHWC convolution; `w` is `[c_in, k * k * c_out]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize, cout: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d expects NHWC input");
        let (n, hi, wi, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (hi - 1) * stride + kernel - 2 * pad;
        let ow = (wi - 1) * stride + kernel - 2 * pad;
        let geom = ConvGeom { batch: n, height: oh, width: ow, channels: cout, kernel, stride, pad };
        assert_eq!((geom.out_height(), geom.out_width()), (hi, wi));
        let wt = self.value(w);
        assert_eq!((wt.rows(), wt.cols()), (cin, geom.patch_len()), "conv_transpose weight shape");
        let rows = n * hi * wi;
        let mut cols = vec![0.0; rows * geom.patch_len()];
        kernels::gemm(rows, cin, geom.patch_len(), self.value(x).data(), false, wt.data(), false, &mut cols, 0.0);
        let out = kernels::col2im(&cols, &geom);
        self.push(Tensor::new(&[n, oh, ow, cout], out), Op::ConvTranspose2d { x, w, geom }, &[x, w])
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        assert_eq!(x.rows(), n, "diag of non-square matrix");
        let v = Tensor::new(&[n], (0..n).map(|i| x.data()[i * n + i]).collect());
        self.push(v, Op::Diag(a), &[a])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar {:?}", self.shape(loss));
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, g, &mut grads);
        }
        let params = self.params.iter().map(|(k, v)| (*k, v.0)).collect();
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g.reshape(self.shape(v))),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.nodes[v.0].needs_grad {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn adjoint(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            Tensor::new(a.shape(), g.data().iter().zip(a.data()).map(|(&gv, &av)| f(gv, av)).collect())
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *b, || g.map(|v| -v));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                self.acc_with(grads, *a, || zip(self.value(*b), &|gv, bv| gv * bv));
                self.acc_with(grads, *b, || zip(self.value(*a), &|gv, av| gv * av));
            }
            Op::Div(a, b) => {
                self.acc_with(grads, *a, || zip(self.value(*b), &|gv, bv| gv / bv));
                self.acc_with(grads, *b, || {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let d = g.data().iter().zip(x.data().iter().zip(y.data())).map(|(gv, (xv, yv))| -gv * xv / (yv * yv));
                    Tensor::new(y.shape(), d.collect())
                });
            }
            Op::AddRow(a, b) | Op::SubRow(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::SubRow(..)) { -1.0 } else { 1.0 };
                self.acc_with(grads, *b, || col_sums(&g).map(|v| sign * v));
                self.acc(grads, *a, g);
            }
            Op::MulRow(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || row_apply(&g, y, |gv, yv| gv * yv));
                self.acc_with(grads, *b, || col_sums(&Tensor::new(g.shape(), g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect())));
            }
            Op::DivRow(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || row_apply(&g, y, |gv, yv| gv / yv));
                self.acc_with(grads, *b, || {
                    let c = y.len();
                    let mut s = vec![0.0; c];
                    for (grow, xrow) in g.data().chunks(c).zip(x.data().chunks(c)) {
                        for j in 0..c {
                            s[j] -= grow[j] * xrow[j] / (y.data()[j] * y.data()[j]);
                        }
                    }
                    Tensor::new(y.shape(), s)
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc_with(grads, *a, || g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g),
            Op::Exp(a) => self.acc_with(grads, *a, || zip(out, &|gv, y| gv * y)),
            Op::Ln(a) => self.acc_with(grads, *a, || zip(self.value(*a), &|gv, x| gv / x)),
            Op::Sqrt(a) => self.acc_with(grads, *a, || zip(out, &|gv, y| gv * 0.5 / y)),
            Op::Tanh(a) => self.acc_with(grads, *a, || zip(out, &|gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => self.acc_with(grads, *a, || zip(out, &|gv, y| gv * y * (1.0 - y))),
            Op::Silu(a) => self.acc_with(grads, *a, || {
                zip(self.value(*a), &|gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                })
            }),
            Op::Square(a) => self.acc_with(grads, *a, || zip(self.value(*a), &|gv, x| 2.0 * gv * x)),
            Op::Softplus(a) => self.acc_with(grads, *a, || zip(self.value(*a), &|gv, x| gv * sigmoid(x))),
            Op::MaxScalar(a, floor) => {
                let f = *floor;
                self.acc_with(grads, *a, || zip(self.value(*a), &|gv, x| if x > f { gv } else { 0.0 }))
            }
            Op::MatMul { a, b, ta, tb } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (ta, tb) = (*ta, *tb);
                let (m, k) = if ta { (x.cols(), x.rows()) } else { (x.rows(), x.cols()) };
                let n = g.cols();
                self.acc_with(grads, *a, || {
                    let mut d = vec![0.0; m * k];
                    if ta {
                        kernels::gemm(k, n, m, y.data(), tb, g.data(), true, &mut d, 0.0);
                    } else {
                        kernels::gemm(m, n, k, g.data(), false, y.data(), !tb, &mut d, 0.0);
                    }
                    Tensor::new(x.shape(), d)
                });
                self.acc_with(grads, *b, || {
                    let mut d = vec![0.0; k * n];
                    if tb {
                        kernels::gemm(n, m, k, g.data(), true, x.data(), ta, &mut d, 0.0);
                    } else {
                        kernels::gemm(k, m, n, x.data(), !ta, g.data(), false, &mut d, 0.0);
                    }
                    Tensor::new(y.shape(), d)
                });
            }
            Op::Bmm { a, b, ta, tb, dims } => {
                let [bs, m, k, n] = *dims;
                let (x, y) = (self.value(*a), self.value(*b));
                let (ta, tb) = (*ta, *tb);
                self.acc_with(grads, *a, || {
                    let mut d = vec![0.0; bs * m * k];
                    if ta {
                        kernels::batched_gemm(bs, k, n, m, y.data(), tb, g.data(), true, &mut d, 0.0);
                    } else {
                        kernels::batched_gemm(bs, m, n, k, g.data(), false, y.data(), !tb, &mut d, 0.0);
                    }
                    Tensor::new(x.shape(), d)
                });
                self.acc_with(grads, *b, || {
                    let mut d = vec![0.0; bs * k * n];
                    if tb {
                        kernels::batched_gemm(bs, n, m, k, g.data(), true, x.data(), ta, &mut d, 0.0);
                    } else {
                        kernels::batched_gemm(bs, k, m, n, x.data(), !ta, g.data(), false, &mut d, 0.0);
                    }
                    Tensor::new(y.shape(), d)
                });
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.acc_with(grads, *a, || Tensor::full(self.shape(*a), gv));
            }
            Op::SumCols(a) => self.acc_with(grads, *a, || {
                let x = self.value(*a);
                let c = x.cols();
                let d = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv, c)).collect();
                Tensor::new(x.shape(), d)
            }),
            Op::SumRows(a) => self.acc_with(grads, *a, || {
                let x = self.value(*a);
                let d = (0..x.rows()).flat_map(|_| g.data().iter().copied()).collect();
                Tensor::new(x.shape(), d)
            }),
            Op::LogSoftmax(a) => self.acc_with(grads, *a, || {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for (grow, yrow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    d.extend(grow.iter().zip(yrow).map(|(gv, y)| gv - y.exp() * s));
                }
                Tensor::new(out.shape(), d)
            }),
            Op::Softmax(x) => self.acc_with(grads, *x, || {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for (grow, yrow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                    d.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - s)));
                }
                Tensor::new(out.shape(), d)
            }),
            Op::RmsNorm { x, scale, eps } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                let c = xv.cols();
                let mut gx = Vec::with_capacity(xv.len());
                let mut gs = vec![0.0; c];
                for (grow, xrow) in g.data().chunks(c).zip(xv.data().chunks(c)) {
                    let ms = xrow.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let r = 1.0 / (ms + eps).sqrt();
                    let mut dot = 0.0;
                    for j in 0..c {
                        let xh = xrow[j] * r;
                        gs[j] += grow[j] * xh;
                        dot += grow[j] * sv.data()[j] * xh;
                    }
                    let mean = dot / c as f64;
                    for j in 0..c {
                        let xh = xrow[j] * r;
                        gx.push(r * (grow[j] * sv.data()[j] - xh * mean));
                    }
                }
                self.acc(grads, *scale, Tensor::new(sv.shape(), gs));
                self.acc(grads, *x, Tensor::new(xv.shape(), gx));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let off = offset;
                    self.acc_with(grads, *p, || {
                        let d = g.data().chunks(total).flat_map(|r| r[off..off + c].iter().copied()).collect();
                        Tensor::new(&[g.rows(), c], d)
                    });
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => self.acc_with(grads, *x, || {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut d = vec![0.0; xv.len()];
                for (r, grow) in g.data().chunks(len).enumerate() {
                    d[r * c + start..r * c + start + len].copy_from_slice(grow);
                }
                Tensor::new(xv.shape(), d)
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let off = offset;
                    self.acc_with(grads, *p, || Tensor::new(&[n], g.data()[off..off + n].to_vec()));
                    offset += n;
                }
            }
            Op::Reshape(a) => self.acc(grads, *a, g),
            Op::Transpose(a) => self.acc_with(grads, *a, || {
                let (r, c) = (g.rows(), g.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                Tensor::new(self.shape(*a), d)
            }),
            Op::GatherRows { x, idx } => self.acc_with(grads, *x, || {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += g.data()[r * c + j];
                    }
                }
                Tensor::new(xv.shape(), d)
            }),
            Op::WhereRows { mask, a, b } => {
                let c = g.cols();
                self.acc_with(grads, *a, || {
                    let av = self.value(*a);
                    let mut d = vec![0.0; av.len()];
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            let dst = if av.rows() == 1 { 0 } else { r };
                            for j in 0..c {
                                d[dst * c + j] += g.data()[r * c + j];
                            }
                        }
                    }
                    Tensor::new(av.shape(), d)
                });
                self.acc_with(grads, *b, || {
                    let mut d = g.clone();
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            d.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    d
                });
            }
            Op::StraightThrough(p) => self.acc(grads, *p, g),
            Op::Permute0213 { x, dims } => self.acc_with(grads, *x, || {
                let [a, b, c, d] = *dims;
                Tensor::new(self.shape(*x), permute_0213(g.data(), [a, c, b, d]))
            }),
            Op::Conv2d { x, w, geom, cols } => {
                let wv = self.value(*w);
                let cout = wv.cols();
                let rows = geom.batch * geom.positions();
                self.acc_with(grads, *w, || {
                    let mut d = vec![0.0; wv.len()];
                    kernels::gemm(geom.patch_len(), rows, cout, cols, true, g.data(), false, &mut d, 0.0);
                    Tensor::new(wv.shape(), d)
                });
                self.acc_with(grads, *x, || {
                    let mut gc = vec![0.0; rows * geom.patch_len()];
                    kernels::gemm(rows, cout, geom.patch_len(), g.data(), false, wv.data(), true, &mut gc, 0.0);
                    Tensor::new(self.shape(*x), kernels::col2im(&gc, geom))
                });
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let cin = xv.cols();
                let rows = xv.rows();
                let gc = kernels::im2col(g.data(), geom);
                self.acc_with(grads, *w, || {
                    let mut d = vec![0.0; wv.len()];
                    kernels::gemm(cin, rows, geom.patch_len(), xv.data(), true, &gc, false, &mut d, 0.0);
                    Tensor::new(wv.shape(), d)
                });
                self.acc_with(grads, *x, || {
                    let mut d = vec![0.0; xv.len()];
                    kernels::gemm(rows, geom.patch_len(), cin, &gc, false, wv.data(), true, &mut d, 0.0);
                    Tensor::new(xv.shape(), d)
                });
            }
            Op::Diag(a) => self.acc_with(grads, *a, || {
                let n = g.len();
                let mut d = vec![0.0; n * n];
                for j in 0..n {
                    d[j * n + j] = g.data()[j];
                }
                Tensor::new(self.shape(*a), d)
            }),
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

fn col_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut s = vec![0.0; c];
    for row in g.data().chunks(c) {
        for (d, v) in s.iter_mut().zip(row) {
            *d += v;
        }
    }
    Tensor::new(&[c], s)
}

fn row_apply(g: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let c = g.cols();
    let d = g.data().chunks(c).flat_map(|row| row.iter().zip(y.data()).map(|(&a, &b)| f(a, b))).collect();
    Tensor::new(g.shape(), d)
}

fn permute_0213(x: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    assert_eq!(x.len(), a * b * c * d);
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}
