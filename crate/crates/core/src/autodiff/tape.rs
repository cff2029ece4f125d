//! Reverse-mode differentiation over a linear operation record.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::kernels::{self, Window};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, v: S) -> S {
        match self {
            // NaN must propagate; `max` would turn it into 0.
            Activation::Relu => {
                if v < S::zero() {
                    S::zero()
                } else {
                    v
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output<S: Scalar>(self, y: S) -> S {
        match self {
            Activation::Relu => {
                if y > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Sigmoid => y * (S::one() - y),
            Activation::Tanh => S::one() - y * y,
        }
    }
}

/// Logistic function, evaluated without overflow for large `|v|`.
#[inline]
pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub(crate) enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    BroadcastAdd(NodeId, NodeId),
    BroadcastMul(NodeId, NodeId),
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId, rows: usize, cols: usize },
    Activation(NodeId, Activation),
    Softmax { x: NodeId, axis: usize },
    Sum(NodeId),
    MeanAxis { x: NodeId, axis: usize },
    Reshape(NodeId),
    Slice { x: NodeId, axis: usize, start: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    /// `cols` is the unfolded input, kept when the kernel needs a gradient.
    Conv2d { x: NodeId, w: NodeId, window: Window, c_out: usize, cols: Option<Vec<S>> },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, x_hat: Vec<S>, inv_std: Vec<S> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<S> },
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) needs_grad: bool,
}

/// Records operations in execution order; backward replays them in reverse.
///
/// A tape and all of its variables are confined to one thread.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
    /// Running hash of every branch taken by non-smooth operations, kept
    /// only when requested.
    branches: Cell<Option<u64>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S> {
    pub(crate) tape: &'t Tape<S>,
    pub(crate) id: NodeId,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), branches: Cell::new(None) }
    }

    /// A tape that fingerprints the branches taken by ReLU and max pooling,
    /// so two evaluations can be checked for lying on the same smooth piece.
    pub fn tracking_branches() -> Self {
        Self { nodes: RefCell::new(Vec::new()), branches: Cell::new(Some(0xcbf2_9ce4_8422_2325)) }
    }

    /// Fingerprint of the branches taken so far, if tracking.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.get()
    }

    pub(crate) fn is_tracking_branches(&self) -> bool {
        self.branches.get().is_some()
    }

    pub(crate) fn note_branches(&self, choices: impl Iterator<Item = u64>) {
        if let Some(h) = self.branches.get() {
            let h = choices.fold(h, |h, c| (h ^ c).wrapping_mul(0x0100_0000_01b3));
            self.branches.set(Some(h));
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor<S>) -> Var<'_, S> {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records a leaf that receives gradients.
    pub fn param(&self, t: &Tensor<S>) -> Var<'_, S> {
        let mut value = t.clone();
        value.set_requires_grad(false);
        self.leaf(value.with_requires_grad())
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&self, mut t: Tensor<S>) -> Var<'_, S> {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub(crate) fn push(&self, mut value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var<'_, S> {
        value.set_requires_grad(needs_grad);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<S>>> {
        self.nodes.borrow()
    }

    /// Computes gradients of the scalar `loss` with respect to every
    /// gradient-requiring leaf it depends on.
    ///
    /// Nodes are visited once each, in reverse recording order. Gradients of
    /// a value used several times are summed.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss was recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![S::one()]);
        let mut leaves: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients {
            grads: leaves,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a leaf variable, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        self.grads
            .get(v.id)?
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.id], g.clone()).expect("gradient shape"))
    }

    pub(crate) fn raw(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id)?.as_deref()
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    target: NodeId,
    f: impl FnOnce(&mut [S]),
) {
    if !nodes[target].needs_grad {
        return;
    }
    let len = nodes[target].value.numel();
    let buf = grads[target].get_or_insert_with(|| vec![S::zero(); len]);
    f(buf);
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn propagate<S: Scalar>(nodes: &[Node<S>], id: NodeId, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let node = &nodes[id];
    let val = |i: NodeId| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale(x, c) => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c));
        }
        Op::BroadcastAdd(x, b) => {
            accumulate(nodes, grads, *x, |d| add_into(d, g));
            let bshape = nodes[*b].value.shape();
            accumulate(nodes, grads, *b, |d| {
                kernels::for_each_broadcast_run(node.value.shape(), bshape, |xo, len, bo, bs| {
                    for i in 0..len {
                        d[bo + i * bs] += g[xo + i];
                    }
                })
            });
        }
        Op::BroadcastMul(x, s) => {
            let (xv, sv) = (val(*x), val(*s));
            let sshape = nodes[*s].value.shape();
            accumulate(nodes, grads, *x, |d| {
                kernels::for_each_broadcast_run(node.value.shape(), sshape, |xo, len, so, ss| {
                    for i in 0..len {
                        d[xo + i] += g[xo + i] * sv[so + i * ss];
                    }
                })
            });
            accumulate(nodes, grads, *s, |d| {
                kernels::for_each_broadcast_run(node.value.shape(), sshape, |xo, len, so, ss| {
                    for i in 0..len {
                        d[so + i * ss] += g[xo + i] * xv[xo + i];
                    }
                })
            });
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a), val(*b));
            // dA = G·Bᵀ, dB = Aᵀ·G
            accumulate(nodes, grads, *a, |d| kernels::gemm_nt(g, bv, d, m, n, k));
            accumulate(nodes, grads, *b, |d| kernels::gemm_tn(av, g, d, k, m, n));
        }
        Op::Transpose { x, rows, cols } => {
            let gt = kernels::transpose(g, *cols, *rows);
            accumulate(nodes, grads, *x, |d| add_into(d, &gt));
        }
        Op::Activation(x, kind) => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * kind.derivative_from_output(y[i]);
                }
            });
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dotp: S = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                        }
                    }
                }
            });
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = kernels::split_axis(nodes[*x].value.shape(), *axis);
            let scale = S::one() / S::of(len as f64);
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |d| add_into(d, g)),
        Op::Slice { x, axis, start } => {
            let (outer, len, inner) = kernels::split_axis(nodes[*x].value.shape(), *axis);
            let taken = node.value.shape()[*axis];
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    let src = &g[o * taken * inner..(o + 1) * taken * inner];
                    let dst = &mut d[(o * len + start) * inner..(o * len + start + taken) * inner];
                    add_into(dst, src);
                }
            });
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let plen = nodes[p].value.shape()[*axis];
                accumulate(nodes, grads, p, |d| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + plen) * inner];
                        add_into(&mut d[o * plen * inner..(o + 1) * plen * inner], src);
                    }
                });
                offset += plen;
            }
        }
        Op::Conv2d { x, w, window, c_out, cols } => {
            let win = *window;
            let plane = win.out_plane();
            let ckk = win.c * win.k * win.k;
            let cols_n = win.n * plane;
            // Regroup G from N×Cout×P to Cout×(N·P).
            let mut gr = vec![S::zero(); c_out * cols_n];
            for n in 0..win.n {
                for co in 0..*c_out {
                    gr[co * cols_n + n * plane..co * cols_n + (n + 1) * plane]
                        .copy_from_slice(&g[(n * c_out + co) * plane..(n * c_out + co + 1) * plane]);
                }
            }
            if nodes[*w].needs_grad {
                let cols = cols.as_ref().expect("columns kept for kernel gradient");
                accumulate(nodes, grads, *w, |d| kernels::gemm_nt(&gr, cols, d, *c_out, cols_n, ckk));
            }
            if nodes[*x].needs_grad {
                let mut dcols = vec![S::zero(); ckk * cols_n];
                kernels::gemm_tn(val(*w), &gr, &mut dcols, ckk, *c_out, cols_n);
                accumulate(nodes, grads, *x, |d| kernels::col2im(&dcols, &win, d));
            }
        }
        Op::MaxPool { x, argmax } => {
            accumulate(nodes, grads, *x, |d| {
                for (o, &i) in argmax.iter().enumerate() {
                    d[i] += g[o];
                }
            });
        }
        Op::BatchNorm { x, gamma, beta, x_hat, inv_std } => {
            let shape = node.value.shape();
            let (n, c) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let count = S::of((n * inner) as f64);
            let mut sum_g = vec![S::zero(); c];
            let mut sum_gx = vec![S::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * inner;
                    for i in base..base + inner {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * x_hat[i];
                    }
                }
            }
            accumulate(nodes, grads, *beta, |d| add_into(d, &sum_g));
            accumulate(nodes, grads, *gamma, |d| add_into(d, &sum_gx));
            let gam = val(*gamma);
            accumulate(nodes, grads, *x, |d| {
                for b in 0..n {
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch] / count;
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            d[i] += k * (count * g[i] - sum_g[ch] - x_hat[i] * sum_gx[ch]);
                        }
                    }
                }
            });
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let classes = nodes[*logits].value.shape()[1];
            let scale = g[0] / S::of(labels.len() as f64);
            accumulate(nodes, grads, *logits, |d| {
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let one_hot = if c == label { S::one() } else { S::zero() };
                        d[r * classes + c] += (probs[r * classes + c] - one_hot) * scale;
                    }
                }
            });
        }
    }
}
