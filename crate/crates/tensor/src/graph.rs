//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles in
//! execution order. Because nodes can only reference earlier nodes the tape is
//! a DAG by construction, and [`Graph::backward`] walks it once in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::numel;
use crate::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Relu,
    Silu,
    Sigmoid,
    Tanh,
    Softplus,
}

/// Fixed sparse linear map from `n_in` source columns to `n_out` rows, stored as CSR.
/// Applied along the last axis: `out[.., r] = Σ w · in[.., col]`.
#[derive(Clone, Debug, Default)]
pub struct SparseMap {
    n_in: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f32>,
}

impl SparseMap {
    pub fn new(n_in: usize) -> Self {
        Self { n_in, offsets: vec![0], cols: vec![], weights: vec![] }
    }

    /// Appends one output row made of `(column, weight)` terms.
    pub fn push_row(&mut self, terms: impl IntoIterator<Item = (usize, f32)>) {
        for (c, w) in terms {
            debug_assert!(c < self.n_in);
            self.cols.push(c as u32);
            self.weights.push(w);
        }
        self.offsets.push(self.cols.len());
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let (s, e) = (self.offsets[r], self.offsets[r + 1]);
        self.cols[s..e].iter().zip(&self.weights[s..e]).map(|(&c, &w)| (c as usize, w))
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Unary(UnaryKind, usize),
    Clamp(usize, f32, f32),
    AddScalar(usize),
    MulScalar(usize, f32),
    SumAll(usize),
    SumAxis(usize, usize),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Upsample(usize, usize),
    Softmax(usize),
    Cumsum { a: usize, axis: usize, exclusive: bool },
    Sparse(usize, Arc<SparseMap>),
    GatherRows(usize, Arc<Vec<usize>>),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Clamp(a, ..)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Narrow(a, ..)
            | Op::Upsample(a, _)
            | Op::Softmax(a)
            | Op::Cumsum { a, .. }
            | Op::Sparse(a, _)
            | Op::GatherRows(a, _) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f32>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Values are materialized eagerly as ops are applied.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
    frozen: Vec<u64>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
    trainable: Vec<bool>,
    params: HashMap<(u64, usize), Var>,
}

impl Gradients {
    /// Gradient for a trainable leaf (zeros when it did not participate).
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if !self.trainable.get(v.0).copied().unwrap_or(false) {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        let data = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; numel(&shape)],
        };
        Tensor::new(shape, data).ok()
    }

    /// Gradients aligned with the store's parameter order; `None` for parameters
    /// never bound into the graph.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        store
            .ids()
            .map(|id| self.params.get(&(store.uid(), id.index())).and_then(|&v| self.get(v)))
            .collect()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn accumulate(slot: &mut Option<Vec<f32>>, contrib: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f32>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it is trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node { value: t.into_data(), shape, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn variable(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: f32) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Marks every parameter of `store` as a constant in this graph.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.push(store.uid());
    }

    /// Binds a stored parameter, reusing the node on repeated calls.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = store.get(id).clone();
        let v = if self.frozen.contains(&store.uid()) { self.constant(t) } else { self.variable(t) };
        self.params.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node holds consistent data")
    }

    pub fn item(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.constant(t)
    }

    /// Takes its value from `value` while passing gradients to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, value: &Tensor) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if value.shape() != shape.as_slice() {
            return Err(shape_err("straight_through", &shape, value.shape()));
        }
        Ok(self.push(value.data().to_vec(), shape, Op::Reshape(x.0)))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out = kernels::broadcast_shape(sa, sb).ok_or_else(|| shape_err("binary", sa, sb))?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = match kind {
            BinaryKind::Add => |x: f32, y: f32| x + y,
            BinaryKind::Sub => |x: f32, y: f32| x - y,
            BinaryKind::Mul => |x: f32, y: f32| x * y,
            BinaryKind::Div => |x: f32, y: f32| x / y,
        };
        let value = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut value = vec![0.0; numel(&out)];
            kernels::for_each_broadcast(&out, sa, sb, |o, i, j| value[o] = f(va[i], vb[j]));
            value
        };
        Ok(self.push(value, out, Op::Binary(kind, a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(f32) -> f32 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Exp => f32::exp,
            UnaryKind::Log => f32::ln,
            UnaryKind::Sqrt => f32::sqrt,
            UnaryKind::Square => |x| x * x,
            UnaryKind::Abs => f32::abs,
            UnaryKind::Relu => |x| x.max(0.0),
            UnaryKind::Silu => |x| x * kernels::sigmoid(x),
            UnaryKind::Sigmoid => kernels::sigmoid,
            UnaryKind::Tanh => f32::tanh,
            UnaryKind::Softplus => kernels::softplus,
        };
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        self.push(value, shape, Op::Unary(kind, a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Silu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = n.shape.clone();
        self.push(value, shape, Op::Clamp(a.0, lo, hi))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| x + s).collect();
        let shape = n.shape.clone();
        self.push(value, shape, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| x * s).collect();
        let shape = n.shape.clone();
        self.push(value, shape, Op::MulScalar(a.0, s))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().map(|&x| x as f64).sum();
        self.push(vec![s as f32], vec![], Op::SumAll(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n as f32)
    }

    /// Sums over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument(format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let x = &self.nodes[a.0].value;
        let mut value = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for k in 0..n {
                    acc += x[(o * n + k) * inner + i] as f64;
                }
                value[o * inner + i] = acc as f32;
            }
        }
        let mut out = shape;
        out[axis] = 1;
        Ok(self.push(value, out, Op::SumAxis(a.0, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self.nodes[a.0].shape.get(axis).unwrap_or(&1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.mul_scalar(s, 1.0 / n.max(1) as f32))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m,k]·[k,n]`, `[b,m,k]·[b,k,n]`, or `[b,m,k]·[k,n]` with a shared right operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let (batch, m, k, n, shared) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, true),
            ([bt, m, k], [k2, n]) if k == k2 => (*bt, *m, *k, *n, true),
            ([bt, m, k], [b2, k2, n]) if k == k2 && bt == b2 => (*bt, *m, *k, *n, false),
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        let mut value = vec![0.0; batch * m * n];
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for i in 0..batch {
            let bo = if shared { 0 } else { i * k * n };
            kernels::gemm(
                m,
                k,
                n,
                &va[i * m * k..],
                false,
                &vb[bo..],
                false,
                &mut value[i * m * n..],
                false,
            );
        }
        let mut out = sa[..sa.len() - 1].to_vec();
        out.push(n);
        Ok(self.push(value, out, Op::MatMul(a.0, b.0)))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if numel(shape) != n.value.len() {
            return Err(shape_err("reshape", &n.shape, shape));
        }
        let value = n.value.clone();
        Ok(self.push(value, shape.to_vec(), Op::Reshape(a.0)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..n.shape.len()).collect::<Vec<_>>() {
            return Err(TensorError::InvalidArgument(format!(
                "permutation {perm:?} for shape {:?}",
                n.shape
            )));
        }
        let value = kernels::permute(&n.value, &n.shape, perm);
        let shape = perm.iter().map(|&p| n.shape[p]).collect();
        Ok(self.push(value, shape, Op::Permute(a.0, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.nodes[a.0].shape.len();
        if r < 2 {
            return Err(TensorError::InvalidArgument("transpose needs rank ≥ 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(first) = xs.first() else {
            return Err(TensorError::InvalidArgument("concat of zero tensors".into()));
        };
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument(format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for x in xs {
            let s = &self.nodes[x.0].shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let n = &self.nodes[x.0];
                let chunk = n.shape[axis] * inner;
                value.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out = base;
        out[axis] = total;
        Ok(self.push(value, out, Op::Concat(xs.iter().map(|v| v.0).collect(), axis)))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "narrow axis {axis} [{start}, {}) of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let x = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            value.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        Ok(self.push(value, out, Op::Narrow(a.0, axis, start)))
    }

    // ---- convolution & resampling ------------------------------------------

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        let ([n, c_in, h, wd], [c_out, c_in2, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(shape_err("conv2d", sx, sw));
        };
        if c_in != c_in2 {
            return Err(shape_err("conv2d", sx, sw));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        if *kh > h + 2 * pad || *kw > wd + 2 * pad {
            return Err(TensorError::InvalidArgument(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let g = ConvGeom {
            c_in: *c_in,
            h: *h,
            w: *wd,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (wd + 2 * pad - kw) / stride + 1,
        };
        Ok((*n, *c_out, g))
    }

    /// 2D cross-correlation with zero padding over `[N, C, H, W]` inputs.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c_out, g) = self.conv_geom(x, w, stride, pad)?;
        if let Some(b) = b {
            if self.nodes[b.0].shape != [c_out] {
                return Err(shape_err("conv2d bias", &self.nodes[b.0].shape, &[c_out]));
            }
        }
        let (k, hw) = (g.k(), g.hw_out());
        let mut cols = vec![0.0; k * hw];
        let mut value = vec![0.0; n * c_out * hw];
        let in_size = g.c_in * g.h * g.w;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        for i in 0..n {
            kernels::im2col(&xv[i * in_size..(i + 1) * in_size], &g, &mut cols);
            let out = &mut value[i * c_out * hw..(i + 1) * c_out * hw];
            kernels::gemm(c_out, k, hw, wv, false, &cols, false, out, false);
            if let Some(b) = b {
                let bv = &self.nodes[b.0].value;
                for (co, row) in out.chunks_mut(hw).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let op = Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), stride, pad };
        Ok(self.push(value, vec![n, c_out, g.h_out, g.w_out], op))
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let [n, c, h, w] = shape[..] else {
            return Err(TensorError::InvalidArgument(format!("upsample expects NCHW, got {shape:?}")));
        };
        let (ho, wo) = (h * factor, w * factor);
        let x = &self.nodes[a.0].value;
        let mut value = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    value[(p * ho + y) * wo + xx] = x[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        Ok(self.push(value, vec![n, c, ho, wo], Op::Upsample(a.0, factor)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let Some(&d) = shape.last() else {
            return Err(TensorError::InvalidArgument("softmax of a scalar".into()));
        };
        let x = &self.nodes[a.0].value;
        let mut value = vec![0.0; x.len()];
        for (src, dst) in x.chunks(d).zip(value.chunks_mut(d)) {
            let m = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0f32;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - m).exp();
                s += *o;
            }
            dst.iter_mut().for_each(|o| *o /= s);
        }
        Ok(self.push(value, shape, Op::Softmax(a.0)))
    }

    /// Running sum along `axis`; `exclusive` shifts by one so element 0 is zero.
    pub fn cumsum(&mut self, a: Var, axis: usize, exclusive: bool) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument(format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let x = &self.nodes[a.0].value;
        let mut value = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f32;
                for k in 0..n {
                    let idx = (o * n + k) * inner + i;
                    if exclusive {
                        value[idx] = acc;
                        acc += x[idx];
                    } else {
                        acc += x[idx];
                        value[idx] = acc;
                    }
                }
            }
        }
        Ok(self.push(value, shape, Op::Cumsum { a: a.0, axis, exclusive }))
    }

    /// Applies a fixed sparse linear map along the last axis.
    pub fn sparse_apply(&mut self, a: Var, map: Arc<SparseMap>) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.last() != Some(&map.n_in()) {
            return Err(shape_err("sparse_apply", &shape, &[map.n_in()]));
        }
        let lead = numel(&shape[..shape.len() - 1]);
        let (n_in, n_out) = (map.n_in(), map.n_out());
        let x = &self.nodes[a.0].value;
        let mut value = vec![0.0; lead * n_out];
        for l in 0..lead {
            let src = &x[l * n_in..(l + 1) * n_in];
            let dst = &mut value[l * n_out..(l + 1) * n_out];
            for (r, o) in dst.iter_mut().enumerate() {
                *o = map.row(r).map(|(c, w)| w * src[c]).sum();
            }
        }
        let mut out = shape;
        *out.last_mut().expect("non-empty") = n_out;
        Ok(self.push(value, out, Op::Sparse(a.0, map)))
    }

    /// Selects rows of a `[K, D]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.nodes[table.0].shape.clone();
        let [k, d] = shape[..] else {
            return Err(TensorError::InvalidArgument(format!("gather_rows on {shape:?}")));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(TensorError::InvalidArgument(format!("row {bad} out of {k}")));
        }
        let t = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            value.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push(value, vec![indices.len(), d], Op::GatherRows(table.0, Arc::new(indices.to_vec()))))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rn = &self.nodes[root.0];
        if rn.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(rn.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(g);
                continue;
            }
            for j in node.op.inputs() {
                if j >= i {
                    return Err(TensorError::Cycle);
                }
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            trainable: self
                .nodes
                .iter()
                .map(|n| n.requires_grad && matches!(n.op, Op::Leaf))
                .collect(),
            params: self.params.clone(),
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let (xa, xb) = (&na.value, &nb.value);
                let mut ga = self.wants(*a).then(|| vec![0.0f32; xa.len()]);
                let mut gb = self.wants(*b).then(|| vec![0.0f32; xb.len()]);
                kernels::for_each_broadcast(&node.shape, &na.shape, &nb.shape, |o, ia, ib| {
                    let go = g[o];
                    let (da, db) = match kind {
                        BinaryKind::Add => (go, go),
                        BinaryKind::Sub => (go, -go),
                        BinaryKind::Mul => (go * xb[ib], go * xa[ia]),
                        BinaryKind::Div => (go / xb[ib], -go * xa[ia] / (xb[ib] * xb[ib])),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                });
                if let Some(ga) = ga {
                    accumulate(&mut grads[*a], ga);
                }
                if let Some(gb) = gb {
                    accumulate(&mut grads[*b], gb);
                }
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[*a].value;
                let d: Vec<f32> = x
                    .iter()
                    .zip(y)
                    .zip(g)
                    .map(|((&x, &y), &go)| {
                        go * match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Exp => y,
                            UnaryKind::Log => 1.0 / x,
                            UnaryKind::Sqrt => 0.5 / y,
                            UnaryKind::Square => 2.0 * x,
                            UnaryKind::Abs => x.signum(),
                            UnaryKind::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Silu => {
                                let s = kernels::sigmoid(x);
                                s + x * s * (1.0 - s)
                            }
                            UnaryKind::Sigmoid => y * (1.0 - y),
                            UnaryKind::Tanh => 1.0 - y * y,
                            UnaryKind::Softplus => kernels::sigmoid(x),
                        }
                    })
                    .collect();
                accumulate(&mut grads[*a], d);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[*a].value;
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &go)| if x >= *lo && x <= *hi { go } else { 0.0 })
                    .collect();
                accumulate(&mut grads[*a], d);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads[*a], g.to_vec()),
            Op::MulScalar(a, s) => accumulate(&mut grads[*a], g.iter().map(|v| v * s).collect()),
            Op::SumAll(a) => {
                let n = self.nodes[*a].value.len();
                accumulate(&mut grads[*a], vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let shape = &self.nodes[*a].shape;
                let (outer, n, inner) = kernels::axis_split(shape, *axis);
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        d[(o * n + k) * inner..(o * n + k + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(&mut grads[*a], d);
            }
            Op::MatMul(a, b) => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let shared = nb.shape.len() == 2;
                let k = *na.shape.last().expect("rank ≥ 2");
                let m = na.shape[na.shape.len() - 2];
                let n = *nb.shape.last().expect("rank 2");
                let batch = na.value.len() / (m * k);
                if self.wants(*a) {
                    let mut ga = vec![0.0; na.value.len()];
                    for bi in 0..batch {
                        let bo = if shared { 0 } else { bi * k * n };
                        // dA = dC · Bᵀ
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            false,
                            &nb.value[bo..],
                            true,
                            &mut ga[bi * m * k..],
                            false,
                        );
                    }
                    accumulate(&mut grads[*a], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; nb.value.len()];
                    for bi in 0..batch {
                        let bo = if shared { 0 } else { bi * k * n };
                        // dB = Aᵀ · dC
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &na.value[bi * m * k..],
                            true,
                            &g[bi * m * n..],
                            false,
                            &mut gb[bo..],
                            shared,
                        );
                    }
                    accumulate(&mut grads[*b], gb);
                }
            }
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_perm(perm);
                accumulate(&mut grads[*a], kernels::permute(g, &node.shape, &inv));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let ext = self.nodes[x].shape[*axis];
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&g[s..s + ext * inner]);
                        }
                        accumulate(&mut grads[x], d);
                    }
                    offset += ext;
                }
            }
            Op::Narrow(a, axis, start) => {
                let shape = &self.nodes[*a].shape;
                let (outer, n, inner) = kernels::axis_split(shape, *axis);
                let len = node.shape[*axis];
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    d[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(&mut grads[*a], d);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, c_out, geom) = self
                    .conv_geom(Var(*x), Var(*w), *stride, *pad)
                    .expect("validated in forward");
                let (k, hw) = (geom.k(), geom.hw_out());
                let in_size = geom.c_in * geom.h * geom.w;
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let mut cols = vec![0.0; k * hw];
                let mut gw = self.wants(*w).then(|| vec![0.0; wv.len()]);
                let mut gx = self.wants(*x).then(|| vec![0.0; xv.len()]);
                for i in 0..n {
                    let go = &g[i * c_out * hw..(i + 1) * c_out * hw];
                    if let Some(gw) = gw.as_mut() {
                        kernels::im2col(&xv[i * in_size..(i + 1) * in_size], &geom, &mut cols);
                        // dW += dY · colsᵀ
                        kernels::gemm(c_out, hw, k, go, false, &cols, true, gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dcols = Wᵀ · dY
                        kernels::gemm(k, c_out, hw, wv, true, go, false, &mut cols, false);
                        kernels::col2im(&cols, &geom, &mut gx[i * in_size..(i + 1) * in_size]);
                    }
                }
                if let Some(gw) = gw {
                    accumulate(&mut grads[*w], gw);
                }
                if let Some(gx) = gx {
                    accumulate(&mut grads[*x], gx);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut gb = vec![0.0; c_out];
                    for i in 0..n {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            let row = &g[(i * c_out + co) * hw..(i * c_out + co + 1) * hw];
                            *acc += row.iter().sum::<f32>();
                        }
                    }
                    accumulate(&mut grads[b], gb);
                }
            }
            Op::Upsample(a, factor) => {
                let shape = &self.nodes[*a].shape;
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (h * factor, w * factor);
                let mut d = vec![0.0; self.nodes[*a].value.len()];
                for p in 0..shape[0] * shape[1] {
                    for yy in 0..ho {
                        for xx in 0..wo {
                            d[(p * h + yy / factor) * w + xx / factor] += g[(p * ho + yy) * wo + xx];
                        }
                    }
                }
                accumulate(&mut grads[*a], d);
            }
            Op::Softmax(a) => {
                let dlen = *node.shape.last().expect("rank ≥ 1");
                let mut d = vec![0.0; y.len()];
                for ((ys, gs), ds) in y.chunks(dlen).zip(g.chunks(dlen)).zip(d.chunks_mut(dlen)) {
                    let dot: f32 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in ds.iter_mut().zip(ys).zip(gs) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(&mut grads[*a], d);
            }
            Op::Cumsum { a, axis, exclusive } => {
                let (outer, n, inner) = kernels::axis_split(&node.shape, *axis);
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut acc = 0.0f32;
                        for k in (0..n).rev() {
                            let idx = (o * n + k) * inner + i;
                            if *exclusive {
                                d[idx] = acc;
                                acc += g[idx];
                            } else {
                                acc += g[idx];
                                d[idx] = acc;
                            }
                        }
                    }
                }
                accumulate(&mut grads[*a], d);
            }
            Op::Sparse(a, map) => {
                let (n_in, n_out) = (map.n_in(), map.n_out());
                let lead = g.len() / n_out.max(1);
                let mut d = vec![0.0; lead * n_in];
                for l in 0..lead {
                    let dst = &mut d[l * n_in..(l + 1) * n_in];
                    let src = &g[l * n_out..(l + 1) * n_out];
                    for (r, &gv) in src.iter().enumerate() {
                        for (c, w) in map.row(r) {
                            dst[c] += w * gv;
                        }
                    }
                }
                accumulate(&mut grads[*a], d);
            }
            Op::GatherRows(t, indices) => {
                let d_model = node.shape[1];
                let mut d = vec![0.0; self.nodes[*t].value.len()];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..d_model {
                        d[i * d_model + j] += g[row * d_model + j];
                    }
                }
                accumulate(&mut grads[*t], d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn straight_through_takes_value_passes_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new([2], vec![0.1, 0.2]).unwrap());
        let q = Tensor::new([2], vec![0.3, -1.0]).unwrap();
        let y = g.straight_through(x, &q).unwrap();
        assert_eq!(g.tensor(y), q);
        let w = g.constant(Tensor::new([2], vec![2.0, 5.0]).unwrap());
        let l = g.mul(y, w).unwrap();
        let l = g.sum(l);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[2.0, 5.0]);
        assert!(g.straight_through(x, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn softplus_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(0.0));
        let y = g.softplus(x);
        assert!((g.item(y) - std::f32::consts::LN_2).abs() < 1e-7);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.5);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones([2]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones([3]));
        let unused = g.variable(Tensor::ones([2, 2]));
        let c = g.constant(Tensor::ones([3]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 4]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::ones([2, 3]));
        let b = g.variable(Tensor::ones([3]));
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([1, 1, 4, 5], |i| i as f32 * 0.3 - 1.0));
        let w = g.constant(Tensor::ones([1, 1, 1, 1]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert_eq!(g.shape(y), &[1, 1, 4, 5]);
    }

    #[test]
    fn box_filter_on_constant_keeps_interior() {
        let c = 2.5;
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 1, 6, 6], c));
        let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0 / 9.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let v = g.value(y);
        for r in 1..5 {
            for col in 1..5 {
                assert!((v[r * 6 + col] - c).abs() < 1e-6);
            }
        }
        // corners only see 4 of 9 taps
        assert!((v[0] - c * 4.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn conv_output_extent_and_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 3, 7, 9]));
        let w = g.constant(Tensor::zeros([4, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 5]);
        let big = g.constant(Tensor::zeros([1, 3, 11, 11]));
        assert!(g.conv2d(x, big, None, 1, 1).is_err());
        assert!(g.conv2d(x, w, None, 0, 1).is_err());
    }

    #[test]
    fn linearity_of_backward() {
        // power-of-two weights keep the scaling exact in floating point
        let (a, b) = (2.0f32, 0.5f32);
        let x0 = Tensor::from_fn([5], |i| 0.3 * i as f32 - 0.4);
        let f = |g: &mut Graph, x: Var| {
            let s = g.sigmoid(x);
            g.sum(s)
        };
        let h = |g: &mut Graph, x: Var| {
            let s = g.square(x);
            g.sum(s)
        };
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let x = g.variable(x0.clone());
            let root = match which {
                0 => f(&mut g, x),
                1 => h(&mut g, x),
                _ => {
                    let fv = f(&mut g, x);
                    let hv = h(&mut g, x);
                    let fa = g.mul_scalar(fv, a);
                    let hb = g.mul_scalar(hv, b);
                    g.add(fa, hb).unwrap()
                }
            };
            g.backward(root).unwrap().get(x).unwrap()
        };
        let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..5 {
            assert_eq!(gc.data()[i], a * gf.data()[i] + b * gh.data()[i]);
        }
    }

    #[test]
    fn cumsum_exclusive_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = g.cumsum(x, 1, true).unwrap();
        assert_eq!(g.value(y), &[0.0, 1.0, 3.0, 0.0, 4.0, 9.0]);
        let z = g.cumsum(x, 0, false).unwrap();
        assert_eq!(g.value(z), &[1.0, 2.0, 3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn frozen_store_binds_constants() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::ones([2]));
        let mut g = Graph::new();
        g.freeze(&store);
        let w = g.param(&store, id);
        assert!(!g.requires_grad(w));
        let mut g2 = Graph::new();
        let w2 = g2.param(&store, id);
        assert_eq!(g2.param(&store, id), w2);
        let s = g2.sum(w2);
        let grads = g2.backward(s).unwrap();
        assert_eq!(grads.for_store(&store)[0].as_ref().unwrap().data(), &[1.0, 1.0]);
    }
}
