//! Reverse-mode automatic differentiation over `f64` dense arrays.
//!
//! The tape records every operation as a node. Backward passes build their
//! results out of tape operations too, so gradients are themselves
//! differentiable: calling [`Tensor::backward`] on a scalar derived from an
//! earlier gradient yields second-order derivatives. This is what the
//! discriminator gradient regularizer relies on.
//!
//! Conventions:
//! - Image tensors are `[B, C, H, W]`, weights `[Cout, Cin, kh, kw]`.
//! - Binary elementwise ops require identical shapes; use
//!   [`Tensor::broadcast_to`] explicitly where expansion is intended.
//! - Shape mismatches inside the engine are programming errors and panic;
//!   fallible validation belongs to the callers' public APIs.
//! - All kernels are deterministic: parallel work is split into fixed chunks
//!   with order-independent (disjoint) writes, and reductions run in a fixed
//!   sequential order, so re-runs are bit-identical.

pub(crate) mod kernels;

pub mod gradcheck;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub use kernels::Pad4;

type Id = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvMeta {
    pub stride: usize,
    pub pad: Pad4,
    /// Spatial size of the convolution *input* (needed to rebuild input
    /// gradients for strided convolutions).
    pub in_hw: (usize, usize),
    pub k: (usize, usize),
}

// Op parameters are kept even where the VJP re-reads them from node shapes;
// they document the recorded computation and feed Debug output.
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Neg(Id),
    Abs(Id),
    LeakyRelu(Id, f64),
    Sigmoid(Id),
    Tanh(Id),
    Softplus(Id),
    Sqr(Id),
    Sqrt(Id),
    Scale(Id, f64),
    AddConst(Id, f64),
    Sum(Id),
    SumAxesKeep(Id, Vec<usize>),
    BroadcastTo(Id),
    Reshape(Id),
    Concat(Vec<Id>, usize),
    SliceAxis { p: Id, axis: usize, start: usize, len: usize },
    EmbedAxis { p: Id, axis: usize, start: usize, full: usize },
    Conv2d { x: Id, w: Id, meta: ConvMeta },
    ConvInputGrad { g: Id, w: Id, meta: ConvMeta },
    ConvWeightGrad { x: Id, g: Id, meta: ConvMeta },
    PadCircular { p: Id, pad: Pad4 },
    PadCircularAdj { p: Id, pad: Pad4 },
    AvgPool2 { p: Id, f: usize },
    AvgPool2Adj { p: Id, f: usize },
    UpBilinear2(Id),
    UpBilinear2Adj(Id),
}

impl Op {
    fn parents(&self) -> Vec<Id> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Neg(a) | Abs(a) | LeakyRelu(a, _) | Sigmoid(a) | Tanh(a) | Softplus(a) | Sqr(a)
            | Sqrt(a) | Scale(a, _) | AddConst(a, _) | Sum(a) | SumAxesKeep(a, _)
            | BroadcastTo(a) | Reshape(a) | UpBilinear2(a) | UpBilinear2Adj(a) => vec![*a],
            Concat(ps, _) => ps.clone(),
            SliceAxis { p, .. } | EmbedAxis { p, .. } => vec![*p],
            Conv2d { x, w, .. } => vec![*x, *w],
            ConvInputGrad { g, w, .. } => vec![*g, *w],
            ConvWeightGrad { x, g, .. } => vec![*x, *g],
            PadCircular { p, .. } | PadCircularAdj { p, .. } => vec![*p],
            AvgPool2 { p, .. } | AvgPool2Adj { p, .. } => vec![*p],
        }
    }
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
}

/// Arena of computation nodes. Cheap to create; one per training half-step
/// or per evaluation is the intended granularity.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { inner: Rc::new(TapeInner { nodes: RefCell::new(Vec::new()) }) }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Tensor {
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        debug_assert!(value.is_standard_layout());
        nodes.push(Node { value, op, requires_grad });
        Tensor { tape: Rc::clone(&self.inner), id }
    }

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&self, value: ArrayD<f64>) -> Tensor {
        let value = to_standard(value);
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input (parameters, or inputs whose gradient is wanted).
    pub fn param(&self, value: ArrayD<f64>) -> Tensor {
        let value = to_standard(value);
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }
}

fn to_standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Handle to a tape node. Clones share the node.
#[derive(Clone)]
pub struct Tensor {
    tape: Rc<TapeInner>,
    id: Id,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    fn tape(&self) -> Tape {
        Tape { inner: Rc::clone(&self.tape) }
    }

    fn same_tape(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    /// Borrow the node value. Do not hold the guard across further tape ops.
    pub fn value_ref(&self) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Clone of the node value.
    pub fn value(&self) -> ArrayD<f64> {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a zero-dim (or single-element) tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.value_ref();
        debug_assert_eq!(v.len(), 1, "scalar() on tensor with {} elements", v.len());
        *v.iter().next().expect("empty tensor")
    }

    fn unary<F>(&self, op: Op, f: F) -> Tensor
    where
        F: FnOnce(&ArrayD<f64>) -> ArrayD<f64>,
    {
        let tape = self.tape();
        let rg = self.requires_grad();
        let value = f(&self.value_ref());
        tape.push(to_standard(value), op, rg)
    }

    fn binary<F>(&self, other: &Tensor, op: Op, f: F) -> Tensor
    where
        F: FnOnce(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
    {
        assert!(self.same_tape(other), "tensors from different tapes");
        let tape = self.tape();
        let rg = self.requires_grad() || other.requires_grad();
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            assert_eq!(a.shape(), b.shape(), "elementwise op shape mismatch");
            f(a, b)
        };
        tape.push(to_standard(value), op, rg)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg(self.id), |a| a.mapv(|v| -v))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Op::Abs(self.id), |a| a.mapv(f64::abs))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(Op::LeakyRelu(self.id, slope), |a| {
            a.mapv(|v| if v > 0.0 { v } else { slope * v })
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid(self.id), |a| a.mapv(sigmoid_stable))
    }

    pub fn tanh_(&self) -> Tensor {
        self.unary(Op::Tanh(self.id), |a| a.mapv(f64::tanh))
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(Op::Softplus(self.id), |a| a.mapv(softplus_stable))
    }

    pub fn sqr(&self) -> Tensor {
        self.unary(Op::Sqr(self.id), |a| a.mapv(|v| v * v))
    }

    pub fn sqrt_(&self) -> Tensor {
        self.unary(Op::Sqrt(self.id), |a| a.mapv(f64::sqrt))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(self.id, c), |a| a.mapv(|v| v * c))
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        self.unary(Op::AddConst(self.id, c), |a| a.mapv(|v| v + c))
    }

    /// Sum of all elements, as a zero-dim tensor.
    pub fn sum(&self) -> Tensor {
        self.unary(Op::Sum(self.id), |a| ArrayD::from_elem(IxDyn(&[]), a.sum()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.value_ref().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over `axes`, keeping reduced dimensions as size 1.
    pub fn sum_axes_keep(&self, axes: &[usize]) -> Tensor {
        let axes_v = axes.to_vec();
        self.unary(Op::SumAxesKeep(self.id, axes_v), |a| kernels::sum_axes_keep(a, axes))
    }

    /// Broadcast to `shape`. The source shape must be a suffix-aligned
    /// pattern of ones/equal dims (numpy rules), e.g. `[1,C,1,1] -> [B,C,H,W]`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        self.unary(Op::BroadcastTo(self.id), |a| {
            a.broadcast(IxDyn(shape))
                .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
                .to_owned()
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        self.unary(Op::Reshape(self.id), |a| {
            let flat: Vec<f64> = a.iter().copied().collect();
            ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape: element count mismatch")
        })
    }

    pub fn slice_axis_op(&self, axis: usize, start: usize, len: usize) -> Tensor {
        self.unary(Op::SliceAxis { p: self.id, axis, start, len }, |a| {
            kernels::slice_axis(a, axis, start, len)
        })
    }

    /// Place this tensor into a zero array whose `axis` has size `full`,
    /// starting at `start`. Adjoint of [`Tensor::slice_axis_op`].
    pub fn embed_axis(&self, axis: usize, start: usize, full: usize) -> Tensor {
        self.unary(Op::EmbedAxis { p: self.id, axis, start, full }, |a| {
            kernels::embed_axis(a, axis, start, full)
        })
    }

    /// 2D convolution: `self` is `[B,Cin,H,W]`, `w` is `[Cout,Cin,kh,kw]`.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: Pad4) -> Tensor {
        assert!(self.same_tape(w), "tensors from different tapes");
        let (value, meta) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let wv = &nodes[w.id].value;
            let meta = ConvMeta {
                stride,
                pad,
                in_hw: (x.shape()[2], x.shape()[3]),
                k: (wv.shape()[2], wv.shape()[3]),
            };
            (kernels::conv2d(x, wv, stride, pad), meta)
        };
        let rg = self.requires_grad() || w.requires_grad();
        self.tape().push(value, Op::Conv2d { x: self.id, w: w.id, meta }, rg)
    }

    /// Gradient of a convolution w.r.t. its input: `self` is the output
    /// cotangent `[B,Cout,Ho,Wo]`. Exposed because it is its own linear op
    /// (a fractionally-strided convolution).
    pub fn conv2d_input_grad(&self, w: &Tensor, meta: ConvMeta) -> Tensor {
        assert!(self.same_tape(w), "tensors from different tapes");
        let value = {
            let nodes = self.tape.nodes.borrow();
            kernels::conv2d_input_grad(&nodes[self.id].value, &nodes[w.id].value, meta)
        };
        let rg = self.requires_grad() || w.requires_grad();
        self.tape().push(value, Op::ConvInputGrad { g: self.id, w: w.id, meta }, rg)
    }

    fn conv2d_weight_grad(&self, g: &Tensor, meta: ConvMeta) -> Tensor {
        assert!(self.same_tape(g), "tensors from different tapes");
        let value = {
            let nodes = self.tape.nodes.borrow();
            kernels::conv2d_weight_grad(&nodes[self.id].value, &nodes[g.id].value, meta)
        };
        let rg = self.requires_grad() || g.requires_grad();
        self.tape().push(value, Op::ConvWeightGrad { x: self.id, g: g.id, meta }, rg)
    }

    pub fn pad_circular(&self, pad: Pad4) -> Tensor {
        self.unary(Op::PadCircular { p: self.id, pad }, |a| kernels::pad_circular(a, pad))
    }

    pub fn avg_pool2(&self, f: usize) -> Tensor {
        self.unary(Op::AvgPool2 { p: self.id, f }, |a| kernels::avg_pool2(a, f))
    }

    pub fn upsample_bilinear2(&self) -> Tensor {
        self.unary(Op::UpBilinear2(self.id), kernels::upsample_bilinear2)
    }

    /// Gradients of this scalar w.r.t. every grad-requiring node.
    pub fn backward(&self) -> Grads {
        self.backward_impl(None)
    }

    /// Gradients restricted to paths that reach `wrt`; avoids building
    /// gradient subgraphs for unrelated parts of the tape.
    pub fn backward_wrt(&self, wrt: &[&Tensor]) -> Grads {
        let ids: Vec<Id> = wrt.iter().map(|t| t.id).collect();
        self.backward_impl(Some(&ids))
    }

    fn backward_impl(&self, wrt: Option<&[Id]>) -> Grads {
        assert_eq!(self.value_ref().len(), 1, "backward requires a scalar loss");
        let tape = self.tape();
        let n = self.id + 1;

        // influenced[i]: node i lies on a path from a wrt leaf (or any
        // grad-requiring leaf when wrt is None).
        let mut influenced = vec![false; n];
        {
            let nodes = self.tape.nodes.borrow();
            match wrt {
                Some(ids) => {
                    for &i in ids {
                        influenced[i] = true;
                    }
                    for i in 0..n {
                        if !influenced[i] {
                            influenced[i] =
                                nodes[i].op.parents().iter().any(|&p| influenced[p]);
                        }
                    }
                }
                None => {
                    for (i, inf) in influenced.iter_mut().enumerate() {
                        *inf = nodes[i].requires_grad;
                    }
                }
            }
        }
        // Also require requires_grad so constants never accumulate gradients.
        {
            let nodes = self.tape.nodes.borrow();
            for i in 0..n {
                influenced[i] = influenced[i] && nodes[i].requires_grad;
            }
        }

        let mut grad: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let seed_shape = self.shape();
        grad[self.id] = Some(tape.leaf(ArrayD::from_elem(IxDyn(&seed_shape), 1.0)));

        // Tape ids are topologically ordered (children after parents), so a
        // single reverse sweep visits every node after all its consumers.
        for id in (0..n).rev() {
            let Some(g) = grad[id].clone() else { continue };
            let op = {
                let nodes = self.tape.nodes.borrow();
                nodes[id].op.clone()
            };
            let contributions = vjp(&tape, &op, id, &g);
            for (pid, contrib) in contributions {
                if !influenced[pid] {
                    continue;
                }
                grad[pid] = Some(match grad[pid].take() {
                    Some(acc) => acc.add(&contrib),
                    None => contrib,
                });
            }
        }

        Grads { grad }
    }
}

fn tensor_for(tape: &Tape, id: Id) -> Tensor {
    Tensor { tape: Rc::clone(&tape.inner), id }
}

/// Vector-Jacobian products, expressed through tape operations so gradients
/// stay differentiable.
fn vjp(tape: &Tape, op: &Op, node_id: Id, g: &Tensor) -> Vec<(Id, Tensor)> {
    use Op::*;
    let t = |id: Id| tensor_for(tape, id);
    match op {
        Leaf => vec![],
        Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Sub(a, b) => vec![(*a, g.clone()), (*b, g.neg())],
        Mul(a, b) => vec![(*a, g.mul(&t(*b))), (*b, g.mul(&t(*a)))],
        Div(a, b) => {
            let y = t(node_id);
            let bt = t(*b);
            vec![(*a, g.div(&bt)), (*b, g.mul(&y).div(&bt).neg())]
        }
        Neg(a) => vec![(*a, g.neg())],
        Abs(a) => {
            // sign(x) is treated as locally constant (zero second derivative).
            let sign = t(*a).value_ref().mapv(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            let sign = tape.leaf(sign);
            vec![(*a, g.mul(&sign))]
        }
        LeakyRelu(a, slope) => {
            let s = *slope;
            let mask = t(*a).value_ref().mapv(|v| if v > 0.0 { 1.0 } else { s });
            let mask = tape.leaf(mask);
            vec![(*a, g.mul(&mask))]
        }
        Sigmoid(a) => {
            let y = t(node_id);
            let one_minus = y.neg().add_const(1.0);
            vec![(*a, g.mul(&y).mul(&one_minus))]
        }
        Tanh(a) => {
            let y = t(node_id);
            let d = y.sqr().neg().add_const(1.0);
            vec![(*a, g.mul(&d))]
        }
        Softplus(a) => vec![(*a, g.mul(&t(*a).sigmoid()))],
        Sqr(a) => vec![(*a, g.mul(&t(*a)).scale(2.0))],
        Sqrt(a) => {
            let y = t(node_id);
            vec![(*a, g.div(&y.scale(2.0)))]
        }
        Scale(a, c) => vec![(*a, g.scale(*c))],
        AddConst(a, _) => vec![(*a, g.clone())],
        Sum(a) => {
            let shape = t(*a).shape();
            vec![(*a, g.broadcast_to(&shape))]
        }
        SumAxesKeep(a, _) => {
            let shape = t(*a).shape();
            vec![(*a, g.broadcast_to(&shape))]
        }
        BroadcastTo(a) => {
            let src_shape = t(*a).shape();
            let dst_shape = g.shape();
            // Sum over the axes that were expanded (aligning trailing dims),
            // then reshape to the source shape.
            let offset = dst_shape.len() - src_shape.len();
            let mut axes: Vec<usize> = (0..offset).collect();
            for (i, &s) in src_shape.iter().enumerate() {
                if s == 1 && dst_shape[offset + i] != 1 {
                    axes.push(offset + i);
                }
            }
            let reduced = if axes.is_empty() { g.clone() } else { g.sum_axes_keep(&axes) };
            vec![(*a, reduced.reshape(&src_shape))]
        }
        Reshape(a) => {
            let shape = t(*a).shape();
            vec![(*a, g.reshape(&shape))]
        }
        Concat(parts, axis) => {
            let mut out = Vec::with_capacity(parts.len());
            let mut start = 0;
            for &p in parts {
                let len = t(p).shape()[*axis];
                out.push((p, g.slice_axis_op(*axis, start, len)));
                start += len;
            }
            out
        }
        SliceAxis { p, axis, start, len: _ } => {
            let full = t(*p).shape()[*axis];
            vec![(*p, g.embed_axis(*axis, *start, full))]
        }
        EmbedAxis { p, axis, start, .. } => {
            let len = t(*p).shape()[*axis];
            vec![(*p, g.slice_axis_op(*axis, *start, len))]
        }
        Conv2d { x, w, meta } => {
            vec![(*x, g.conv2d_input_grad(&t(*w), *meta)), (*w, t(*x).conv2d_weight_grad(g, *meta))]
        }
        ConvInputGrad { g: g0, w, meta } => {
            // dx = A^T(g0) with A = conv(.,w): d/dg0 = A(u), d/dw = weight-grad(u, g0).
            vec![(*g0, g.conv2d(&t(*w), meta.stride, meta.pad)), (*w, g.conv2d_weight_grad(&t(*g0), *meta))]
        }
        ConvWeightGrad { x, g: g0, meta } => {
            vec![(*x, t(*g0).conv2d_input_grad(g, *meta)), (*g0, t(*x).conv2d(g, meta.stride, meta.pad))]
        }
        PadCircular { p, pad } => {
            let v = {
                let g_val = g.value_ref();
                kernels::pad_circular_adjoint(&g_val, *pad)
            };
            let node = tape.push(v, Op::PadCircularAdj { p: g.id, pad: *pad }, g.requires_grad());
            vec![(*p, node)]
        }
        PadCircularAdj { p, pad } => {
            vec![(*p, g.pad_circular(*pad))]
        }
        AvgPool2 { p, f } => {
            let v = {
                let g_val = g.value_ref();
                kernels::avg_pool2_adjoint(&g_val, *f)
            };
            let node = tape.push(v, Op::AvgPool2Adj { p: g.id, f: *f }, g.requires_grad());
            vec![(*p, node)]
        }
        AvgPool2Adj { p, f } => vec![(*p, g.avg_pool2(*f))],
        UpBilinear2(a) => {
            let v = {
                let g_val = g.value_ref();
                kernels::upsample_bilinear2_adjoint(&g_val)
            };
            let node = tape.push(v, Op::UpBilinear2Adj(g.id), g.requires_grad());
            vec![(*a, node)]
        }
        UpBilinear2Adj(a) => vec![(*a, g.upsample_bilinear2())],
    }
}

/// Result of a backward pass: per-node gradients, themselves tape tensors.
pub struct Grads {
    grad: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `t`, if any path carried one.
    /// `None` means the gradient is exactly zero.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        self.grad.get(t.id).and_then(|g| g.clone())
    }

    /// Gradient as an owned array, zero-filled when absent.
    pub fn get_or_zero(&self, t: &Tensor) -> ArrayD<f64> {
        match self.get(t) {
            Some(g) => g.value(),
            None => ArrayD::zeros(IxDyn(&t.shape())),
        }
    }
}

/// Concatenate along `axis`.
pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty());
    let tape = parts[0].tape();
    let rg = parts.iter().any(|p| p.requires_grad());
    let value = {
        let nodes = tape.inner.nodes.borrow();
        let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
        ndarray::concatenate(ndarray::Axis(axis), &views).expect("concat shape mismatch")
    };
    let ids = parts.iter().map(|p| p.id).collect();
    tape.push(to_standard(value), Op::Concat(ids, axis), rg)
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
