//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation on a [`Var`] evaluates eagerly, appends its output to
//! the tape and remembers how to route gradients back to its inputs.
//! Nodes are appended in evaluation order, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! The tape also keeps an [`AllocLog`] of every buffer it stores, which
//! the attention benchmarks use to show that the linear kernels never
//! materialize a token-by-token matrix.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::linalg::{axis_split, gemm, transpose};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

pub type NodeId = usize;

/// Sentinel for [`Var::gather`]: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

/// User supplied backward rule: `(inputs, output, upstream) -> one gradient buffer per input`.
pub type BackwardFn<T> = Rc<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

/// Record of every buffer stored on a tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AllocLog {
    shapes: Vec<Vec<usize>>,
    bytes: usize,
    largest: usize,
}

impl AllocLog {
    fn record(&mut self, shape: &[usize], elem_bytes: usize) {
        let numel: usize = shape.iter().product();
        self.bytes += numel * elem_bytes;
        self.largest = self.largest.max(numel);
        self.shapes.push(shape.to_vec());
    }

    /// Bytes held by the tape. Buffers are never freed while the tape is
    /// alive, so this is also the peak.
    pub fn peak_bytes(&self) -> usize {
        self.bytes
    }

    pub fn largest_numel(&self) -> usize {
        self.largest
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    /// True if any recorded buffer holds at least `n * n` elements.
    pub fn has_quadratic_buffer(&self, n: usize) -> bool {
        self.largest >= n * n
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: T },
    AddScalar { a: NodeId },
    DivByScalar { a: NodeId, s: NodeId },
    Softmax { a: NodeId, axis: usize },
    L2Normalize { a: NodeId, axis: usize, eps: T },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, stats: Vec<(T, T)> },
    Gelu { a: NodeId },
    Log { a: NodeId },
    Clamp { a: NodeId, lo: T, hi: T },
    Sum { a: NodeId },
    SumAxis { a: NodeId, axis: usize },
    ConcatCols { a: NodeId, b: NodeId },
    Gather { a: NodeId, index: Rc<[u32]> },
    DwConv3x3 { x: NodeId, w: NodeId, b: NodeId, height: usize, width: usize },
    Reshape { a: NodeId },
    Transpose { a: NodeId },
    Custom { inputs: Vec<NodeId>, backward: BackwardFn<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b } => vec![*a, *b],
            AddBias { a, bias } => vec![*a, *bias],
            DivByScalar { a, s } => vec![*a, *s],
            ConcatCols { a, b } => vec![*a, *b],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            DwConv3x3 { x, w, b, .. } => vec![*x, *w, *b],
            Scale { a, .. }
            | AddScalar { a }
            | Softmax { a, .. }
            | L2Normalize { a, .. }
            | Gelu { a }
            | Log { a }
            | Clamp { a, .. }
            | Sum { a }
            | SumAxis { a, .. }
            | Gather { a, .. }
            | Reshape { a }
            | Transpose { a } => vec![*a],
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    log: AllocLog,
}

/// Single-threaded recording of a computation.
pub struct Tape<T: Scalar> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if no gradient reached it.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { inner: RefCell::new(Inner { nodes: Vec::new(), log: AllocLog::default() }) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alloc_log(&self) -> AllocLog {
        self.inner.borrow().log.clone()
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.log.record(value.shape(), T::BYTES);
        inner.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self, id: inner.nodes.len() - 1 }
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| inner.nodes[i].requires_grad);
        inner.log.record(value.shape(), T::BYTES);
        inner.nodes.push(Node { value, op, requires_grad });
        Ok(Var { tape: self, id: inner.nodes.len() - 1 })
    }

    fn check_owner(&self, v: Var<'_, T>) {
        assert!(std::ptr::eq(self, v.tape), "variable belongs to a different tape");
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_owner(root);
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(vec![T::one(); nodes[root.id].value.numel()]);
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(nodes, id, &g, &mut grads);
        }
        let mut out = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.iter().zip(grads) {
            match (g, &node.op) {
                (Some(g), Op::Leaf) => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    out.push(Some(Tensor::from_parts(node.value.shape().to_vec(), g)));
                }
                _ => out.push(None),
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: NodeId,
    contribution: impl FnOnce() -> Vec<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    let c = contribution();
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(c) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(c),
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[id].value;
    let val = |i: NodeId| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(a), val(b));
            let ad = av.dims2().expect("matrix");
            let bd = bv.dims2().expect("matrix");
            let (m, _) = if ta { (ad.1, ad.0) } else { ad };
            let (_, n) = if tb { (bd.1, bd.0) } else { bd };
            accumulate(nodes, grads, a, || {
                if ta {
                    gemm(bv.data(), bd, tb, g, (m, n), true).0
                } else {
                    gemm(g, (m, n), false, bv.data(), bd, !tb).0
                }
            });
            accumulate(nodes, grads, b, || {
                if tb {
                    gemm(g, (m, n), true, av.data(), ad, ta).0
                } else {
                    gemm(av.data(), ad, !ta, g, (m, n), false).0
                }
            });
        }
        &Op::Add { a, b } => {
            accumulate(nodes, grads, a, || g.to_vec());
            accumulate(nodes, grads, b, || g.to_vec());
        }
        &Op::Sub { a, b } => {
            accumulate(nodes, grads, a, || g.to_vec());
            accumulate(nodes, grads, b, || g.iter().map(|&v| -v).collect());
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(nodes, grads, a, || g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
            accumulate(nodes, grads, b, || g.iter().zip(av).map(|(&g, &a)| g * a).collect());
        }
        &Op::Div { a, b } => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(nodes, grads, a, || g.iter().zip(bv).map(|(&g, &b)| g / b).collect());
            accumulate(nodes, grads, b, || {
                g.iter().zip(av).zip(bv).map(|((&g, &a), &b)| -g * a / (b * b)).collect()
            });
        }
        &Op::AddBias { a, bias } => {
            accumulate(nodes, grads, a, || g.to_vec());
            let d = val(bias).numel();
            accumulate(nodes, grads, bias, || {
                let mut db = vec![T::zero(); d];
                for row in g.chunks_exact(d) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                db
            });
        }
        &Op::Scale { a, c } => accumulate(nodes, grads, a, || g.iter().map(|&v| v * c).collect()),
        &Op::AddScalar { a } => accumulate(nodes, grads, a, || g.to_vec()),
        &Op::DivByScalar { a, s } => {
            let sv = val(s).data()[0];
            accumulate(nodes, grads, a, || g.iter().map(|&v| v / sv).collect());
            accumulate(nodes, grads, s, || {
                let dot: T = g.iter().zip(val(a).data()).map(|(&g, &x)| g * x).sum();
                vec![-dot / (sv * sv)]
            });
        }
        &Op::Softmax { a, axis } => accumulate(nodes, grads, a, || {
            let (outer, len, inner) = axis_split(out.shape(), axis);
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..len {
                        dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            dx
        }),
        &Op::L2Normalize { a, axis, eps } => accumulate(nodes, grads, a, || {
            let (outer, len, inner) = axis_split(out.shape(), axis);
            let (x, y) = (val(a).data(), out.data());
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let norm = (0..len).map(|k| x[at(k)] * x[at(k)]).sum::<T>().sqrt();
                    if norm > eps {
                        let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = (g[at(k)] - y[at(k)] * dot) / norm;
                        }
                    } else {
                        for k in 0..len {
                            dx[at(k)] = g[at(k)] / eps;
                        }
                    }
                }
            }
            dx
        }),
        Op::LayerNorm { x, gamma, beta, stats } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let xv = val(x).data();
            let gm = val(gamma).data();
            let d = gm.len();
            let xhat = |r: usize, j: usize| (xv[r * d + j] - stats[r].0) * stats[r].1;
            accumulate(nodes, grads, x, || {
                let mut dx = vec![T::zero(); xv.len()];
                let inv_d = T::one() / T::c(d as f64);
                for (r, &(_, rstd)) in stats.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = grow[j] * gm[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat(r, j);
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    for j in 0..d {
                        let dxh = grow[j] * gm[j];
                        dx[r * d + j] = rstd * (dxh - mean_dxh - xhat(r, j) * mean_dxh_xh);
                    }
                }
                dx
            });
            accumulate(nodes, grads, gamma, || {
                let mut dg = vec![T::zero(); d];
                for r in 0..stats.len() {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xhat(r, j);
                    }
                }
                dg
            });
            accumulate(nodes, grads, beta, || {
                let mut db = vec![T::zero(); d];
                for row in g.chunks_exact(d) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                db
            });
        }
        &Op::Gelu { a } => accumulate(nodes, grads, a, || {
            let inv_sqrt2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
            let inv_sqrt_2pi = T::c(0.398_942_280_401_432_7);
            let half = T::c(0.5);
            g.iter()
                .zip(val(a).data())
                .map(|(&g, &x)| {
                    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                    g * (cdf + x * pdf)
                })
                .collect()
        }),
        &Op::Log { a } => accumulate(nodes, grads, a, || g.iter().zip(val(a).data()).map(|(&g, &x)| g / x).collect()),
        &Op::Clamp { a, lo, hi } => accumulate(nodes, grads, a, || {
            g.iter()
                .zip(val(a).data())
                .map(|(&g, &x)| if x < lo || x > hi { T::zero() } else { g })
                .collect()
        }),
        &Op::Sum { a } => accumulate(nodes, grads, a, || vec![g[0]; val(a).numel()]),
        &Op::SumAxis { a, axis } => accumulate(nodes, grads, a, || {
            let (outer, len, inner) = axis_split(val(a).shape(), axis);
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        dx[o * len * inner + k * inner + i] = g[o * inner + i];
                    }
                }
            }
            dx
        }),
        &Op::ConcatCols { a, b } => {
            let (rows, ca) = val(a).dims2().expect("matrix");
            let cb = val(b).dims2().expect("matrix").1;
            let w = ca + cb;
            accumulate(nodes, grads, a, || (0..rows).flat_map(|r| g[r * w..r * w + ca].iter().copied()).collect());
            accumulate(nodes, grads, b, || (0..rows).flat_map(|r| g[r * w + ca..(r + 1) * w].iter().copied()).collect());
        }
        Op::Gather { a, index } => accumulate(nodes, grads, *a, || {
            let mut dx = vec![T::zero(); val(*a).numel()];
            for (&src, &gv) in index.iter().zip(g) {
                if src != GATHER_ZERO {
                    dx[src as usize] += gv;
                }
            }
            dx
        }),
        &Op::DwConv3x3 { x, w, b, height, width } => {
            let xv = val(x).data();
            let wv = val(w).data();
            let c = val(b).numel();
            accumulate(nodes, grads, x, || {
                let mut dx = vec![T::zero(); xv.len()];
                dwconv_taps(height, width, |p, q, tap| {
                    let (gp, wt) = (&g[p * c..(p + 1) * c], &wv[tap * c..(tap + 1) * c]);
                    for ((d, &gv), &wv) in dx[q * c..(q + 1) * c].iter_mut().zip(gp).zip(wt) {
                        *d += gv * wv;
                    }
                });
                dx
            });
            accumulate(nodes, grads, w, || {
                let mut dw = vec![T::zero(); wv.len()];
                dwconv_taps(height, width, |p, q, tap| {
                    let (gp, xq) = (&g[p * c..(p + 1) * c], &xv[q * c..(q + 1) * c]);
                    for ((d, &gv), &xv) in dw[tap * c..(tap + 1) * c].iter_mut().zip(gp).zip(xq) {
                        *d += gv * xv;
                    }
                });
                dw
            });
            accumulate(nodes, grads, b, || {
                let mut db = vec![T::zero(); c];
                for row in g.chunks_exact(c) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                db
            });
        }
        &Op::Reshape { a } => accumulate(nodes, grads, a, || g.to_vec()),
        &Op::Transpose { a } => accumulate(nodes, grads, a, || {
            let (r, c) = out.dims2().expect("matrix");
            transpose(g, r, c)
        }),
        Op::Custom { inputs, backward } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let mut parts = backward(&ins, out, g).into_iter();
            for &i in inputs {
                let part = parts.next().expect("custom backward returns one buffer per input");
                assert_eq!(part.len(), val(i).numel(), "custom backward buffer size");
                accumulate(nodes, grads, i, || part);
            }
        }
    }
}

/// Calls `f(out_pos, in_pos, tap)` for every in-bounds tap of a 3x3
/// stride-1 convolution with zero padding 1 on a `height x width` grid.
fn dwconv_taps(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize)) {
    for r in 0..height {
        for col in 0..width {
            let p = r * width + col;
            for dr in 0..3 {
                let rr = r + dr;
                if rr < 1 || rr > height {
                    continue;
                }
                for dc in 0..3 {
                    let cc = col + dc;
                    if cc < 1 || cc > width {
                        continue;
                    }
                    f(p, (rr - 1) * width + (cc - 1), dr * 3 + dc);
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Axis { op, axis, rank: shape.len() });
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Borrow of the stored value; drop it before recording new ops.
    pub fn value_ref(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.inner.borrow(), |inner| &inner.nodes[self.id].value)
    }

    pub fn value(&self) -> Tensor<T> {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        self.value_ref().dims2()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        let v = self.value_ref();
        assert_eq!(v.numel(), 1, "item() on a tensor with {} elements", v.numel());
        v.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn unary(
        self,
        name: &'static str,
        f: impl FnOnce(&Tensor<T>) -> Result<(Tensor<T>, Op<T>)>,
    ) -> Result<Var<'t, T>> {
        let (value, op) = {
            let inner = self.tape.inner.borrow();
            f(&inner.nodes[self.id].value)?
        };
        self.tape.push(name, value, op)
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<(Tensor<T>, Op<T>)>,
    ) -> Result<Var<'t, T>> {
        self.tape.check_owner(other);
        let (value, op) = {
            let inner = self.tape.inner.borrow();
            f(&inner.nodes[self.id].value, &inner.nodes[other.id].value)?
        };
        self.tape.push(name, value, op)
    }

    fn zip_with(
        self,
        other: Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.binary(other, name, |a, b| {
            same_shape(name, a.shape(), b.shape())?;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), data), op))
        })
    }

    fn map_with(self, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var<'t, T>> {
        self.unary(name, |a| {
            let data = a.data().iter().map(|&x| f(x)).collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), data), op))
        })
    }

    /// Matrix product `self * other`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) * op(other)` where each flag transposes its operand.
    pub fn matmul_t(self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "matmul", |av, bv| {
            let ad = av.dims2()?;
            let bd = bv.dims2()?;
            let k_a = if ta { ad.0 } else { ad.1 };
            let k_b = if tb { bd.1 } else { bd.0 };
            if k_a != k_b {
                return Err(Error::dim(
                    "matmul",
                    format!("inner extents differ: {:?}{} x {:?}{}", ad, if ta { "^T" } else { "" }, bd, if tb { "^T" } else { "" }),
                ));
            }
            let (c, m, n) = gemm(av.data(), ad, ta, bv.data(), bd, tb);
            Ok((Tensor::from_parts(vec![m, n], c), Op::MatMul { a, b, ta, tb }))
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::Add { a: self.id, b: other.id };
        self.zip_with(other, "add", op, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::Sub { a: self.id, b: other.id };
        self.zip_with(other, "sub", op, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::Mul { a: self.id, b: other.id };
        self.zip_with(other, "mul", op, |x, y| x * y)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::Div { a: self.id, b: other.id };
        self.zip_with(other, "div", op, |x, y| x / y)
    }

    /// Adds a length-`d` vector to every row of a `(.., d)` tensor.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::AddBias { a: self.id, bias: bias.id };
        self.binary(bias, "add_bias", |a, b| {
            let d = *a.shape().last().expect("rank >= 1");
            if b.numel() != d {
                return Err(Error::dim("add_bias", format!("bias of {} for width {d}", b.numel())));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_exact_mut(d) {
                for (x, &bv) in row.iter_mut().zip(b.data()) {
                    *x += bv;
                }
            }
            Ok((Tensor::from_parts(a.shape().to_vec(), data), op))
        })
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        self.map_with("scale", Op::Scale { a: self.id, c }, |x| x * c)
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        self.map_with("add_scalar", Op::AddScalar { a: self.id }, |x| x + c)
    }

    /// Divides every element by a one-element variable.
    pub fn div_scalar(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::DivByScalar { a: self.id, s: s.id };
        self.binary(s, "div_scalar", |a, sv| {
            if sv.numel() != 1 {
                return Err(Error::dim("div_scalar", format!("divisor has {} elements", sv.numel())));
            }
            let s = sv.data()[0];
            let data = a.data().iter().map(|&x| x / s).collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), data), op))
        })
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let id = self.id;
        self.unary("softmax", |a| {
            check_axis("softmax", a.shape(), axis)?;
            Ok((softmax_values(a, axis), Op::Softmax { a: id, axis }))
        })
    }

    /// Divides each slice along `axis` by `max(norm, eps)`.
    pub fn l2_normalize(self, axis: usize, eps: T) -> Result<Var<'t, T>> {
        let id = self.id;
        self.unary("l2_normalize", |a| {
            check_axis("l2_normalize", a.shape(), axis)?;
            let (outer, len, inner) = axis_split(a.shape(), axis);
            let x = a.data();
            let mut y = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let norm = (0..len).map(|k| x[at(k)] * x[at(k)]).sum::<T>().sqrt();
                    let denom = norm.max(eps);
                    for k in 0..len {
                        y[at(k)] = x[at(k)] / denom;
                    }
                }
            }
            Ok((Tensor::from_parts(a.shape().to_vec(), y), Op::L2Normalize { a: id, axis, eps }))
        })
    }

    /// Per-row standardization over the last axis (population variance)
    /// followed by the affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.tape.check_owner(gamma);
        self.tape.check_owner(beta);
        let (value, op) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let gm = inner.nodes[gamma.id].value.data();
            let bt = inner.nodes[beta.id].value.data();
            let d = *x.shape().last().expect("rank >= 1");
            if gm.len() != d || bt.len() != d {
                return Err(Error::dim("layer_norm", format!("affine of {}/{} for width {d}", gm.len(), bt.len())));
            }
            let inv_d = T::one() / T::c(d as f64);
            let mut y = Vec::with_capacity(x.numel());
            let mut stats = Vec::with_capacity(x.numel() / d);
            for row in x.data().chunks_exact(d) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rstd = T::one() / (var + eps).sqrt();
                for j in 0..d {
                    y.push((row[j] - mean) * rstd * gm[j] + bt[j]);
                }
                stats.push((mean, rstd));
            }
            let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, stats };
            (Tensor::from_parts(x.shape().to_vec(), y), op)
        };
        self.tape.push("layer_norm", value, op)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        let half = T::c(0.5);
        let inv_sqrt2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
        self.map_with("gelu", Op::Gelu { a: self.id }, |x| half * x * (T::one() + (x * inv_sqrt2).erf()))
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        self.map_with("log", Op::Log { a: self.id }, |x| x.ln())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Result<Var<'t, T>> {
        self.map_with("clamp", Op::Clamp { a: self.id, lo, hi }, |x| x.max(lo).min(hi))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let id = self.id;
        self.unary("sum", |a| Ok((Tensor::scalar(a.data().iter().copied().sum()), Op::Sum { a: id })))
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = T::c(self.value_ref().numel() as f64);
        self.sum()?.scale(T::one() / n)
    }

    /// Sums along `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let id = self.id;
        self.unary("sum_axis", |a| {
            check_axis("sum_axis", a.shape(), axis)?;
            let (outer, len, inner) = axis_split(a.shape(), axis);
            let x = a.data();
            let mut y = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    let src = &x[o * len * inner + k * inner..o * len * inner + (k + 1) * inner];
                    for (acc, &v) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Ok((Tensor::from_parts(shape, y), Op::SumAxis { a: id, axis }))
        })
    }

    /// Concatenates two matrices with equal row counts along the columns.
    pub fn concat_cols(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let op = Op::ConcatCols { a: self.id, b: other.id };
        self.binary(other, "concat_cols", |a, b| {
            let (ra, ca) = a.dims2()?;
            let (rb, cb) = b.dims2()?;
            if ra != rb {
                return Err(Error::dim("concat_cols", format!("{ra} rows vs {rb} rows")));
            }
            let mut data = Vec::with_capacity(ra * (ca + cb));
            for r in 0..ra {
                data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
                data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
            }
            Ok((Tensor::from_parts(vec![ra, ca + cb], data), op))
        })
    }

    /// `out[i] = self.flat[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(self, index: Rc<[u32]>, shape: Vec<usize>) -> Result<Var<'t, T>> {
        let id = self.id;
        self.unary("gather", |a| {
            let numel: usize = shape.iter().product();
            if numel != index.len() || shape.contains(&0) {
                return Err(Error::dim("gather", format!("{} indices for shape {shape:?}", index.len())));
            }
            let src = a.data();
            let mut data = Vec::with_capacity(numel);
            for &i in index.iter() {
                if i == GATHER_ZERO {
                    data.push(T::zero());
                } else {
                    let v = src.get(i as usize).ok_or_else(|| {
                        Error::dim("gather", format!("index {i} out of range for {} elements", src.len()))
                    })?;
                    data.push(*v);
                }
            }
            Ok((Tensor::from_parts(shape, data), Op::Gather { a: id, index }))
        })
    }

    /// Depth-wise 3x3 convolution (stride 1, zero padding 1) of an
    /// `(height*width) x c` token matrix. `w` holds `9 * c` taps laid out
    /// `[ky][kx][channel]`; `b` holds `c` biases.
    pub fn dwconv3x3(self, w: Var<'t, T>, b: Var<'t, T>, height: usize, width: usize) -> Result<Var<'t, T>> {
        self.tape.check_owner(w);
        self.tape.check_owner(b);
        let (value, op) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let (n, c) = x.dims2()?;
            if n != height * width {
                return Err(Error::Grid { tokens: n, height, width });
            }
            let wv = inner.nodes[w.id].value.data();
            let bv = inner.nodes[b.id].value.data();
            if wv.len() != 9 * c || bv.len() != c {
                return Err(Error::dim("dwconv3x3", format!("{} taps and {} biases for {c} channels", wv.len(), bv.len())));
            }
            let xv = x.data();
            let mut y = Vec::with_capacity(n * c);
            for _ in 0..n {
                y.extend_from_slice(bv);
            }
            dwconv_taps(height, width, |p, q, tap| {
                let (xq, wt) = (&xv[q * c..(q + 1) * c], &wv[tap * c..(tap + 1) * c]);
                for ((o, &xv), &wv) in y[p * c..(p + 1) * c].iter_mut().zip(xq).zip(wt) {
                    *o += wv * xv;
                }
            });
            let op = Op::DwConv3x3 { x: self.id, w: w.id, b: b.id, height, width };
            (Tensor::from_parts(vec![n, c], y), op)
        };
        self.tape.push("dwconv3x3", value, op)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, T>> {
        let id = self.id;
        self.unary("reshape", |a| {
            let t = a.clone().reshape(shape)?;
            Ok((t, Op::Reshape { a: id }))
        })
    }

    /// Matrix transpose.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let id = self.id;
        self.unary("transpose", |a| Ok((a.transpose()?, Op::Transpose { a: id })))
    }

    /// Records an operation with a caller supplied forward value and
    /// backward rule.
    pub fn custom(
        inputs: &[Var<'t, T>],
        forward: impl FnOnce(&[&Tensor<T>]) -> Result<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Var<'t, T>> {
        let tape = inputs.first().expect("custom op needs an input").tape;
        for &v in inputs {
            tape.check_owner(v);
        }
        let value = {
            let inner = tape.inner.borrow();
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| &inner.nodes[v.id].value).collect();
            forward(&ins)?
        };
        let op = Op::Custom { inputs: inputs.iter().map(|v| v.id).collect(), backward };
        tape.push("custom", value, op)
    }
}

pub(crate) fn softmax_values<T: Scalar>(a: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(a.shape(), axis);
    let x = a.data();
    let mut y = vec![T::zero(); x.len()];
    if inner == 1 {
        for (src, dst) in x.chunks_exact(len).zip(y.chunks_exact_mut(len)) {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
    } else {
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    y[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    y[at(k)] /= total;
                }
            }
        }
    }
    Tensor::from_parts(a.shape().to_vec(), y)
}
