//! Dense rank-4 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once created; every operation records how its
//! output was produced, and the resulting DAG is walked backwards from a
//! scalar output to accumulate gradients for any leaf created with
//! `requires_grad`. Node ids increase monotonically with construction, so
//! construction order is a valid topological order and every node's inputs
//! precede it.
//!
//! Gradients live in a [`GradStore`] keyed by tensor id rather than inside
//! the tensors themselves, which keeps tensors shareable across threads.

mod boxsum;
mod conv;
mod elem;
mod ops;
mod shape;

pub use elem::Elem;
pub use shape::Shape;

use crate::sat::SummedAreaTable;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("backward requires a scalar (1x1x1x1) output, got {got}")]
    NonScalarBackward { got: Shape },
    #[error("axis {axis} out of range for rank-4 tensor")]
    InvalidAxis { axis: usize },
    #[error("{op}: NaN corner coordinate at flat index {index}")]
    NanCorner { op: &'static str, index: usize },
    #[error("data length {got} does not match shape {shape} ({expected} elements)")]
    DataLength {
        got: usize,
        shape: Shape,
        expected: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

fn fresh_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Gelu,
    Sigmoid,
    Softplus,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<E: Elem> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Tensor<E>,
        b: Tensor<E>,
    },
    AddScalar {
        x: Tensor<E>,
    },
    MulScalar {
        x: Tensor<E>,
        c: f64,
    },
    Unary {
        kind: UnaryKind,
        x: Tensor<E>,
    },
    Conv2d {
        x: Tensor<E>,
        w: Tensor<E>,
        bias: Option<Tensor<E>>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    LayerNorm {
        x: Tensor<E>,
        gain: Tensor<E>,
        bias: Tensor<E>,
        eps: f64,
    },
    Softmax {
        x: Tensor<E>,
        axis: usize,
    },
    PixelUnshuffle {
        x: Tensor<E>,
        r: usize,
    },
    PixelShuffle {
        x: Tensor<E>,
        r: usize,
    },
    Matmul {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    MatmulNt {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    TransposeHw {
        x: Tensor<E>,
    },
    Reshape {
        x: Tensor<E>,
    },
    Concat {
        parts: Vec<Tensor<E>>,
        axis: usize,
    },
    Slice {
        x: Tensor<E>,
        axis: usize,
        start: usize,
    },
    SumAll {
        x: Tensor<E>,
    },
    MeanAll {
        x: Tensor<E>,
    },
    DynBoxSum {
        corners: [Tensor<E>; 4],
        sats: Arc<Vec<SummedAreaTable>>,
    },
}

struct Inner<E: Elem> {
    id: usize,
    shape: Shape,
    data: Vec<E>,
    op: Op<E>,
    /// True when gradients flow through this tensor (leaf flag, or any
    /// tracked input for interior nodes).
    tracked: bool,
}

/// Immutable rank-4 tensor participating in a differentiable graph.
pub struct Tensor<E: Elem> {
    inner: Arc<Inner<E>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<E: Elem> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={}, tracked={})",
            self.inner.id, self.inner.shape, self.inner.tracked
        )
    }
}

/// Gradients produced by [`Tensor::backward`], keyed by tensor identity.
pub struct GradStore<E: Elem> {
    grads: HashMap<usize, Vec<E>>,
}

impl<E: Elem> GradStore<E> {
    pub fn get(&self, t: &Tensor<E>) -> Option<&[E]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn contains(&self, t: &Tensor<E>) -> bool {
        self.grads.contains_key(&t.id())
    }

    fn accumulate(&mut self, t: &Tensor<E>, delta: &[E]) {
        if !t.inner.tracked {
            return;
        }
        let entry = self
            .grads
            .entry(t.id())
            .or_insert_with(|| vec![E::ZERO; t.numel()]);
        for (g, d) in entry.iter_mut().zip(delta) {
            *g += *d;
        }
    }
}

impl<E: Elem> Tensor<E> {
    fn from_op(shape: Shape, data: Vec<E>, op: Op<E>, tracked: bool) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        // Untracked results do not keep their inputs alive.
        let op = if tracked { op } else { Op::Leaf };
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                op,
                tracked,
            }),
        }
    }

    /// Create a leaf tensor from row-major data.
    pub fn from_vec(shape: Shape, data: Vec<E>, requires_grad: bool) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                got: data.len(),
                shape,
                expected: shape.numel(),
            });
        }
        Ok(Tensor::from_op(shape, data, Op::Leaf, requires_grad))
    }

    pub fn zeros(shape: Shape, requires_grad: bool) -> Self {
        Tensor::from_op(shape, vec![E::ZERO; shape.numel()], Op::Leaf, requires_grad)
    }

    pub fn full(shape: Shape, value: f64, requires_grad: bool) -> Self {
        Tensor::from_op(
            shape,
            vec![E::from_f64(value); shape.numel()],
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn from_fn(shape: Shape, requires_grad: bool, mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..shape.numel()).map(|i| E::from_f64(f(i))).collect();
        Tensor::from_op(shape, data, Op::Leaf, requires_grad)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }
    pub fn shape(&self) -> Shape {
        self.inner.shape
    }
    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }
    pub fn data(&self) -> &[E] {
        &self.inner.data
    }
    pub fn requires_grad(&self) -> bool {
        self.inner.tracked
    }
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.inner.data[self.inner.shape.idx(n, c, h, w)]
    }

    /// Value of a 1x1x1x1 tensor.
    pub fn scalar_value(&self) -> E {
        debug_assert!(self.inner.shape.is_scalar());
        self.inner.data[0]
    }

    /// Copy of this tensor's data as a fresh untracked leaf.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::from_op(self.inner.shape, self.inner.data.clone(), Op::Leaf, false)
    }

    /// Same data, converted element type (used to move between the working
    /// and verification precisions).
    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        let data = self.data().iter().map(|v| F::from_f64(v.to_f64())).collect();
        Tensor::from_op(self.inner.shape, data, Op::Leaf, false)
    }

    // ---- elementwise ----

    fn binary(&self, other: &Tensor<E>, kind: BinaryKind, name: &'static str) -> Result<Self> {
        let shape = ops::broadcast_shape(self.shape(), other.shape(), name)?;
        let data = ops::binary_forward(kind, self, other, shape);
        let tracked = self.inner.tracked || other.inner.tracked;
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Binary {
                kind,
                a: self.clone(),
                b: other.clone(),
            },
            tracked,
        ))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Self> {
        self.binary(other, BinaryKind::Add, "add")
    }
    pub fn sub(&self, other: &Tensor<E>) -> Result<Self> {
        self.binary(other, BinaryKind::Sub, "sub")
    }
    pub fn mul(&self, other: &Tensor<E>) -> Result<Self> {
        self.binary(other, BinaryKind::Mul, "mul")
    }
    pub fn div(&self, other: &Tensor<E>) -> Result<Self> {
        self.binary(other, BinaryKind::Div, "div")
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        let cc = E::from_f64(c);
        let data = self.data().iter().map(|v| *v + cc).collect();
        Tensor::from_op(
            self.shape(),
            data,
            Op::AddScalar { x: self.clone() },
            self.inner.tracked,
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Self {
        let cc = E::from_f64(c);
        let data = self.data().iter().map(|v| *v * cc).collect();
        Tensor::from_op(
            self.shape(),
            data,
            Op::MulScalar { x: self.clone(), c },
            self.inner.tracked,
        )
    }

    fn unary(&self, kind: UnaryKind) -> Self {
        let data = ops::unary_forward(kind, self.data());
        Tensor::from_op(
            self.shape(),
            data,
            Op::Unary {
                kind,
                x: self.clone(),
            },
            self.inner.tracked,
        )
    }

    /// Exact Gaussian-CDF GELU: `0.5 x (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&self) -> Self {
        self.unary(UnaryKind::Gelu)
    }
    pub fn sigmoid(&self) -> Self {
        self.unary(UnaryKind::Sigmoid)
    }
    pub fn softplus(&self) -> Self {
        self.unary(UnaryKind::Softplus)
    }
    pub fn abs_val(&self) -> Self {
        self.unary(UnaryKind::Abs)
    }

    // ---- structured ops ----

    pub fn conv2d(
        &self,
        w: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let (out_shape, ()) = conv::check_conv(self.shape(), w.shape(), bias.map(|b| b.shape()), stride, padding, groups)?;
        let data = conv::forward(
            self.data(),
            self.shape(),
            w.data(),
            w.shape(),
            bias.map(|b| b.data()),
            stride,
            padding,
            groups,
            out_shape,
        );
        let tracked = self.inner.tracked
            || w.inner.tracked
            || bias.map(|b| b.inner.tracked).unwrap_or(false);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                bias: bias.cloned(),
                stride,
                padding,
                groups,
            },
            tracked,
        ))
    }

    /// Layer normalization over the channel axis at each spatial location,
    /// with per-channel affine parameters shaped `(1, C, 1, 1)`.
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: f64) -> Result<Self> {
        let c = self.shape().c();
        if c == 0 {
            return Err(TensorError::Shape {
                op: "layer_norm",
                msg: "channel dimension is zero".into(),
            });
        }
        for (name, t) in [("gain", gain), ("bias", bias)] {
            if t.shape() != Shape::new(1, c, 1, 1) {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    msg: format!("{name} must be 1x{c}x1x1, got {}", t.shape()),
                });
            }
        }
        let data = ops::layer_norm_forward(self, gain.data(), bias.data(), eps);
        let tracked = self.inner.tracked || gain.inner.tracked || bias.inner.tracked;
        Ok(Tensor::from_op(
            self.shape(),
            data,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
            },
            tracked,
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= 4 {
            return Err(TensorError::InvalidAxis { axis });
        }
        let data = ops::softmax_forward(self, axis);
        Ok(Tensor::from_op(
            self.shape(),
            data,
            Op::Softmax {
                x: self.clone(),
                axis,
            },
            self.inner.tracked,
        ))
    }

    /// Space-to-depth: `(N, C, H, W) -> (N, C r^2, H/r, W/r)`.
    ///
    /// Output channel `c r^2 + dy r + dx` holds input pixels at offset
    /// `(dy, dx)` within each `r x r` cell.
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Self> {
        let s = self.shape();
        if r == 0 || s.h() % r != 0 || s.w() % r != 0 {
            return Err(TensorError::Shape {
                op: "pixel_unshuffle",
                msg: format!("spatial dims {}x{} not divisible by r={r}", s.h(), s.w()),
            });
        }
        let (data, out_shape) = ops::pixel_unshuffle(self, r);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::PixelUnshuffle { x: self.clone(), r },
            self.inner.tracked,
        ))
    }

    /// Depth-to-space inverse of [`pixel_unshuffle`](Self::pixel_unshuffle).
    pub fn pixel_shuffle(&self, r: usize) -> Result<Self> {
        let s = self.shape();
        if r == 0 || s.c() % (r * r) != 0 {
            return Err(TensorError::Shape {
                op: "pixel_shuffle",
                msg: format!("channel dim {} not divisible by r^2={}", s.c(), r * r),
            });
        }
        let (data, out_shape) = ops::pixel_shuffle(self, r);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::PixelShuffle { x: self.clone(), r },
            self.inner.tracked,
        ))
    }

    /// Batched matrix multiply, treating the first two axes as batch and the
    /// last two as matrices: `(N, G, R, K) x (N, G, K, C) -> (N, G, R, C)`.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Self> {
        let (a, b) = (self.shape(), other.shape());
        if a.n() != b.n() || a.c() != b.c() {
            return Err(TensorError::Shape {
                op: "matmul",
                msg: format!("batch dims differ: {a} vs {b}"),
            });
        }
        if a.w() != b.h() {
            return Err(TensorError::Shape {
                op: "matmul",
                msg: format!("inner dims differ: {} vs {}", a.w(), b.h()),
            });
        }
        let out_shape = Shape::new(a.n(), a.c(), a.h(), b.w());
        let data = ops::matmul_forward(self, other, out_shape);
        let tracked = self.inner.tracked || other.inner.tracked;
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Matmul {
                a: self.clone(),
                b: other.clone(),
            },
            tracked,
        ))
    }

    /// `A x B^T` over the last two axes: `(N, G, R, K) x (N, G, C, K) ->
    /// (N, G, R, C)`. Equivalent to `a.matmul(&b.transpose_hw())` but reads
    /// both operands along contiguous rows.
    pub fn matmul_nt(&self, other: &Tensor<E>) -> Result<Self> {
        let (a, b) = (self.shape(), other.shape());
        if a.n() != b.n() || a.c() != b.c() {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                msg: format!("batch dims differ: {a} vs {b}"),
            });
        }
        if a.w() != b.w() {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                msg: format!("inner dims differ: {} vs {}", a.w(), b.w()),
            });
        }
        let out_shape = Shape::new(a.n(), a.c(), a.h(), b.h());
        let data = ops::matmul_nt_forward(self, other, out_shape);
        let tracked = self.inner.tracked || other.inner.tracked;
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::MatmulNt {
                a: self.clone(),
                b: other.clone(),
            },
            tracked,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_hw(&self) -> Self {
        let (data, out_shape) = ops::transpose_hw(self);
        Tensor::from_op(
            out_shape,
            data,
            Op::TransposeHw { x: self.clone() },
            self.inner.tracked,
        )
    }

    pub fn reshape(&self, dims: [usize; 4]) -> Result<Self> {
        let out_shape = Shape(dims);
        if out_shape.numel() != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                msg: format!("{} has {} elements, target {out_shape} has {}", self.shape(), self.numel(), out_shape.numel()),
            });
        }
        Ok(Tensor::from_op(
            out_shape,
            self.inner.data.clone(),
            Op::Reshape { x: self.clone() },
            self.inner.tracked,
        ))
    }

    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Self> {
        if axis >= 4 {
            return Err(TensorError::InvalidAxis { axis });
        }
        if parts.is_empty() {
            return Err(TensorError::Shape {
                op: "concat",
                msg: "no tensors to concatenate".into(),
            });
        }
        let first = parts[0].shape();
        let mut total = 0;
        for p in parts {
            for ax in 0..4 {
                if ax != axis && p.shape().dim(ax) != first.dim(ax) {
                    return Err(TensorError::Shape {
                        op: "concat",
                        msg: format!(
                            "axis {ax} differs: {} vs {}",
                            p.shape(),
                            first
                        ),
                    });
                }
            }
            total += p.shape().dim(axis);
        }
        let mut dims = first.0;
        dims[axis] = total;
        let out_shape = Shape(dims);
        let data = ops::concat_forward(parts, axis, out_shape);
        let tracked = parts.iter().any(|p| p.inner.tracked);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= 4 {
            return Err(TensorError::InvalidAxis { axis });
        }
        let s = self.shape();
        if start + len > s.dim(axis) || len == 0 {
            return Err(TensorError::Shape {
                op: "slice",
                msg: format!(
                    "range {start}..{} out of bounds for axis {axis} of {s}",
                    start + len
                ),
            });
        }
        let mut dims = s.0;
        dims[axis] = len;
        let out_shape = Shape(dims);
        let data = ops::slice_forward(self, axis, start, len);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Slice {
                x: self.clone(),
                axis,
                start,
            },
            self.inner.tracked,
        ))
    }

    pub fn sum_all(&self) -> Self {
        let mut acc = E::ZERO;
        for v in self.data() {
            acc += *v;
        }
        Tensor::from_op(
            Shape::new(1, 1, 1, 1),
            vec![acc],
            Op::SumAll { x: self.clone() },
            self.inner.tracked,
        )
    }

    pub fn mean_all(&self) -> Self {
        let mut acc = E::ZERO;
        for v in self.data() {
            acc += *v;
        }
        let n = E::from_f64(self.numel() as f64);
        Tensor::from_op(
            Shape::new(1, 1, 1, 1),
            vec![acc / n],
            Op::MeanAll { x: self.clone() },
            self.inner.tracked,
        )
    }

    /// Per-pixel box sums over per-channel summed-area tables.
    ///
    /// The four corner tensors are `(N, 1, H, W)` coordinate fields
    /// (left x, right x, top y, bottom y) in padded-table convention; `sats`
    /// holds one table per `(batch, channel)` pair in channel-major order.
    /// Corners are clamped to each table's domain; the output is
    /// `(N, channels, H, W)`. Gradients flow to the corner coordinates only;
    /// the tables are treated as constants.
    pub fn dyn_box_sum(
        xlo: &Tensor<E>,
        xhi: &Tensor<E>,
        ylo: &Tensor<E>,
        yhi: &Tensor<E>,
        sats: Arc<Vec<SummedAreaTable>>,
    ) -> Result<Self> {
        let (data, out_shape) = boxsum::forward(xlo, xhi, ylo, yhi, &sats)?;
        let tracked = [xlo, xhi, ylo, yhi].iter().any(|t| t.inner.tracked);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::DynBoxSum {
                corners: [xlo.clone(), xhi.clone(), ylo.clone(), yhi.clone()],
                sats,
            },
            tracked,
        ))
    }

    // ---- backward ----

    /// Reverse-mode gradient of a scalar output w.r.t. all tracked leaves.
    pub fn backward(&self) -> Result<GradStore<E>> {
        if !self.shape().is_scalar() {
            return Err(TensorError::NonScalarBackward { got: self.shape() });
        }
        let mut store = GradStore {
            grads: HashMap::new(),
        };
        if !self.inner.tracked {
            return Ok(store);
        }

        // Collect the tracked subgraph; ids are construction-ordered, so
        // descending id order is a reverse topological order.
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.inner.tracked || !seen.insert(t.id()) {
                continue;
            }
            for input in t.op_inputs() {
                stack.push(input);
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        store.grads.insert(self.id(), vec![E::ONE]);
        for node in &nodes {
            let is_leaf = matches!(node.inner.op, Op::Leaf);
            let g = if is_leaf {
                continue;
            } else {
                match store.grads.remove(&node.id()) {
                    Some(g) => g,
                    None => continue,
                }
            };
            node.backward_step(&g, &mut store);
        }
        Ok(store)
    }

    fn op_inputs(&self) -> Vec<Tensor<E>> {
        match &self.inner.op {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } => vec![a.clone(), b.clone()],
            Op::AddScalar { x } | Op::MulScalar { x, .. } | Op::Unary { x, .. } => vec![x.clone()],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![x.clone(), w.clone()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![x.clone(), gain.clone(), bias.clone()],
            Op::Softmax { x, .. }
            | Op::PixelUnshuffle { x, .. }
            | Op::PixelShuffle { x, .. }
            | Op::TransposeHw { x }
            | Op::Reshape { x }
            | Op::Slice { x, .. }
            | Op::SumAll { x }
            | Op::MeanAll { x } => vec![x.clone()],
            Op::Matmul { a, b } | Op::MatmulNt { a, b } => vec![a.clone(), b.clone()],
            Op::Concat { parts, .. } => parts.clone(),
            Op::DynBoxSum { corners, .. } => corners.to_vec(),
        }
    }

    fn backward_step(&self, g: &[E], store: &mut GradStore<E>) {
        match &self.inner.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (ga, gb) = ops::binary_backward(*kind, a, b, self, g);
                store.accumulate(a, &ga);
                store.accumulate(b, &gb);
            }
            Op::AddScalar { x } => store.accumulate(x, g),
            Op::MulScalar { x, c } => {
                let cc = E::from_f64(*c);
                let gx: Vec<E> = g.iter().map(|v| *v * cc).collect();
                store.accumulate(x, &gx);
            }
            Op::Unary { kind, x } => {
                let gx = ops::unary_backward(*kind, x.data(), self.data(), g);
                store.accumulate(x, &gx);
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
                groups,
            } => {
                if x.inner.tracked {
                    let gx = conv::backward_x(
                        g,
                        self.shape(),
                        w.data(),
                        w.shape(),
                        x.shape(),
                        *stride,
                        *padding,
                        *groups,
                    );
                    store.accumulate(x, &gx);
                }
                if w.inner.tracked {
                    let gw = conv::backward_w(
                        g,
                        self.shape(),
                        x.data(),
                        x.shape(),
                        w.shape(),
                        *stride,
                        *padding,
                        *groups,
                    );
                    store.accumulate(w, &gw);
                }
                if let Some(b) = bias {
                    if b.inner.tracked {
                        let gb = conv::backward_b(g, self.shape());
                        store.accumulate(b, &gb);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (gx, gg, gb) = ops::layer_norm_backward(x, gain.data(), *eps, g);
                store.accumulate(x, &gx);
                store.accumulate(gain, &gg);
                store.accumulate(bias, &gb);
            }
            Op::Softmax { x, axis } => {
                let gx = ops::softmax_backward(self, *axis, g);
                store.accumulate(x, &gx);
            }
            Op::PixelUnshuffle { x, r } => {
                let gx = ops::pixel_unshuffle_backward(self.shape(), *r, g);
                store.accumulate(x, &gx);
            }
            Op::PixelShuffle { x, r } => {
                let gx = ops::pixel_shuffle_backward(self.shape(), *r, g);
                store.accumulate(x, &gx);
            }
            Op::Matmul { a, b } => {
                let (ga, gb) = ops::matmul_backward(a, b, g);
                store.accumulate(a, &ga);
                store.accumulate(b, &gb);
            }
            Op::MatmulNt { a, b } => {
                let (ga, gb) = ops::matmul_nt_backward(a, b, g);
                store.accumulate(a, &ga);
                store.accumulate(b, &gb);
            }
            Op::TransposeHw { x } => {
                let gx = ops::transpose_hw_raw(g, self.shape());
                store.accumulate(x, &gx);
            }
            Op::Reshape { x } => store.accumulate(x, g),
            Op::Concat { parts, axis } => {
                let gs = ops::concat_backward(parts, *axis, self.shape(), g);
                for (p, gp) in parts.iter().zip(gs) {
                    store.accumulate(p, &gp);
                }
            }
            Op::Slice { x, axis, start } => {
                let gx = ops::slice_backward(x.shape(), *axis, *start, self.shape(), g);
                store.accumulate(x, &gx);
            }
            Op::SumAll { x } => {
                let gx = vec![g[0]; x.numel()];
                store.accumulate(x, &gx);
            }
            Op::MeanAll { x } => {
                let v = g[0] / E::from_f64(x.numel() as f64);
                let gx = vec![v; x.numel()];
                store.accumulate(x, &gx);
            }
            Op::DynBoxSum { corners, sats } => {
                let gs = boxsum::backward(corners, sats, self.shape(), g);
                for (c, gc) in corners.iter().zip(gs) {
                    store.accumulate(c, &gc);
                }
            }
        }
    }
}
