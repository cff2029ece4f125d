//! Differentiable operations on tape variables.

use std::cell::Ref;

use super::kernels::{self, Window};
use super::tape::{Activation, Node, Op, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance over the normalized axes.
    pub var: Vec<S>,
    /// Number of values each channel was normalized over.
    pub count: usize,
}

impl<'t, S: Scalar> Var<'t, S> {
    fn node(&self) -> Ref<'t, Node<S>> {
        Ref::map(self.tape.nodes(), |n| &n[self.id])
    }

    fn needs_grad(&self) -> bool {
        self.node().needs_grad
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor<S> {
        let mut t = self.node().value.clone();
        t.set_requires_grad(false);
        t
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.node().value)
    }

    fn same_tape(&self, other: &Var<'t, S>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
    }

    fn emit(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var<'t, S> {
        self.tape.push(value, op, needs_grad)
    }

    fn zip_same(
        &self,
        other: &Var<'t, S>,
        name: &str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var<'t, S>> {
        self.same_tape(other);
        let value = {
            let (a, b) = (self.node(), other.node());
            if a.value.shape() != b.value.shape() {
                return Err(dim_err(format!(
                    "{name}: shapes {:?} and {:?} differ",
                    a.value.shape(),
                    b.value.shape()
                )));
            }
            let data = a.value.data().iter().zip(b.value.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.value.shape(), data)?
        };
        let ng = self.needs_grad() || other.needs_grad();
        Ok(self.emit(value, op, ng))
    }

    pub fn add(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.zip_same(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.zip_same(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.zip_same(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: S) -> Var<'t, S> {
        let value = self.node().value.map(|v| v * c);
        self.emit(value, Op::Scale(self.id, c), self.needs_grad())
    }

    fn check_broadcast(&self, b: &Var<'t, S>, name: &str) -> Result<()> {
        self.same_tape(b);
        let (xs, bs) = (self.shape(), b.shape());
        let ok = xs.len() == bs.len() && xs.iter().zip(&bs).all(|(x, b)| b == x || *b == 1);
        if ok {
            Ok(())
        } else {
            Err(dim_err(format!("{name}: cannot broadcast {bs:?} onto {xs:?}")))
        }
    }

    fn broadcast(&self, b: &Var<'t, S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (x, bn) = (self.node(), b.node());
        let (xv, bv) = (x.value.data(), bn.value.data());
        let mut out = vec![S::zero(); xv.len()];
        kernels::for_each_broadcast_run(x.value.shape(), bn.value.shape(), |xo, len, bo, bs| {
            for i in 0..len {
                out[xo + i] = f(xv[xo + i], bv[bo + i * bs]);
            }
        });
        Tensor::new(x.value.shape(), out).expect("broadcast shape")
    }

    /// `self + b` where `b` has the same rank and size-1 dimensions are repeated.
    pub fn broadcast_add(&self, b: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.check_broadcast(b, "broadcast_add")?;
        let value = self.broadcast(b, |x, y| x + y);
        let ng = self.needs_grad() || b.needs_grad();
        Ok(self.emit(value, Op::BroadcastAdd(self.id, b.id), ng))
    }

    /// `self ⊙ s` where `s` has the same rank and size-1 dimensions are repeated.
    pub fn broadcast_mul(&self, s: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.check_broadcast(s, "broadcast_mul")?;
        let value = self.broadcast(s, |x, y| x * y);
        let ng = self.needs_grad() || s.needs_grad();
        Ok(self.emit(value, Op::BroadcastMul(self.id, s.id), ng))
    }

    /// Matrix product of `M×K` and `K×N` operands.
    pub fn matmul(&self, b: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.same_tape(b);
        let (asz, bsz) = (self.shape(), b.shape());
        if asz.len() != 2 || bsz.len() != 2 || asz[1] != bsz[0] {
            return Err(dim_err(format!("matmul: cannot multiply {asz:?} by {bsz:?}")));
        }
        let (m, k, n) = (asz[0], asz[1], bsz[1]);
        let value = {
            let (a, bn) = (self.node(), b.node());
            let mut c = vec![S::zero(); m * n];
            kernels::gemm_nn(a.value.data(), bn.value.data(), &mut c, m, k, n);
            Tensor::new(&[m, n], c)?
        };
        let ng = self.needs_grad() || b.needs_grad();
        Ok(self.emit(value, Op::MatMul { a: self.id, b: b.id, m, k, n }, ng))
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Var<'t, S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(dim_err(format!("transpose of non-matrix {s:?}")));
        }
        let data = kernels::transpose(self.node().value.data(), s[0], s[1]);
        let value = Tensor::new(&[s[1], s[0]], data)?;
        Ok(self.emit(value, Op::Transpose { x: self.id, rows: s[0], cols: s[1] }, self.needs_grad()))
    }

    pub fn activation(&self, kind: Activation) -> Var<'t, S> {
        if kind == Activation::Relu && self.tape.is_tracking_branches() {
            self.tape.note_branches(self.node().value.data().iter().map(|&v| u64::from(v > S::zero())));
        }
        let value = self.node().value.map(|v| kind.apply(v));
        self.emit(value, Op::Activation(self.id, kind), self.needs_grad())
    }

    pub fn relu(&self) -> Var<'t, S> {
        self.activation(Activation::Relu)
    }

    pub fn sigmoid(&self) -> Var<'t, S> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(&self) -> Var<'t, S> {
        self.activation(Activation::Tanh)
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, S>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(dim_err(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let value = {
            let x = self.node();
            Tensor::new(&shape, softmax_along(x.value.data(), &shape, axis))?
        };
        Ok(self.emit(value, Op::Softmax { x: self.id, axis }, self.needs_grad()))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Var<'t, S> {
        let s = self.node().value.sum();
        self.emit(Tensor::scalar(s), Op::Sum(self.id), self.needs_grad())
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, S>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(dim_err(format!("mean axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let value = {
            let x = self.node();
            let xv = x.value.data();
            let mut out = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let row = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                    add_assign(&mut out[o * inner..(o + 1) * inner], row);
                }
            }
            let count = S::of(len as f64);
            out.iter_mut().for_each(|v| *v /= count);
            let mut new_shape = shape.clone();
            new_shape.remove(axis);
            Tensor::new(&new_shape, out)?
        };
        Ok(self.emit(value, Op::MeanAxis { x: self.id, axis }, self.needs_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, S>> {
        let value = self.node().value.reshape(shape)?;
        Ok(self.emit(value, Op::Reshape(self.id), self.needs_grad()))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, S>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err(format!(
                "slice {start}..{} on axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = kernels::split_axis(&shape, axis);
        let value = {
            let x = self.node();
            let xv = x.value.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&xv[(o * full + start) * inner..(o * full + start + len) * inner]);
            }
            let mut new_shape = shape.clone();
            new_shape[axis] = len;
            Tensor::new(&new_shape, out)?
        };
        Ok(self.emit(value, Op::Slice { x: self.id, axis, start }, self.needs_grad()))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        let first = parts.first().ok_or_else(|| dim_err("concat of zero variables"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(dim_err(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            first.same_tape(p);
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(dim_err(format!("concat of {base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let nodes = first.tape.nodes();
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let plen = v.shape()[axis];
                    out.extend_from_slice(&v.data()[o * plen * inner..(o + 1) * plen * inner]);
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let ng = parts.iter().any(|p| p.needs_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(value, Op::Concat { parts: ids, axis }, ng))
    }

    /// Stacks equally shaped variables along a new axis.
    pub fn stack(parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        let expanded = parts
            .iter()
            .map(|p| {
                let mut s = p.shape();
                if axis > s.len() {
                    return Err(dim_err(format!("stack axis {axis} out of range for {s:?}")));
                }
                s.insert(axis, 1);
                p.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::concat(&expanded, axis)
    }

    /// 2-D convolution of `N×C_in×H×W` by `C_out×C_in×k×k` with zero padding.
    pub fn conv2d(&self, w: &Var<'t, S>, stride: usize, pad: usize) -> Result<Var<'t, S>> {
        self.same_tape(w);
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(dim_err(format!("conv2d: input {xs:?}, kernel {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(dim_err(format!(
                "conv2d: input has {} channels but kernel {ws:?} expects {}",
                xs[1], ws[1]
            )));
        }
        let k = ws[2];
        if stride == 0 || k > xs[2] + 2 * pad || k > xs[3] + 2 * pad {
            return Err(dim_err(format!(
                "conv2d: kernel {k} stride {stride} pad {pad} does not fit input {xs:?}"
            )));
        }
        let window = Window { n: xs[0], c: xs[1], h: xs[2], w: xs[3], k, stride, pad };
        let c_out = ws[0];
        let plane = window.out_plane();
        let cols_n = window.n * plane;
        let ckk = window.c * k * k;
        let keep_cols = w.needs_grad();
        let (value, cols) = {
            let (x, wn) = (self.node(), w.node());
            let cols = kernels::im2col(x.value.data(), &window);
            let mut res = vec![S::zero(); c_out * cols_n];
            kernels::gemm_nn(wn.value.data(), &cols, &mut res, c_out, ckk, cols_n);
            let mut out = vec![S::zero(); window.n * c_out * plane];
            for n in 0..window.n {
                for co in 0..c_out {
                    out[(n * c_out + co) * plane..(n * c_out + co + 1) * plane]
                        .copy_from_slice(&res[co * cols_n + n * plane..co * cols_n + (n + 1) * plane]);
                }
            }
            let value = Tensor::new(&[window.n, c_out, window.out_h(), window.out_w()], out)?;
            (value, keep_cols.then_some(cols))
        };
        let ng = self.needs_grad() || w.needs_grad();
        Ok(self.emit(value, Op::Conv2d { x: self.id, w: w.id, window, c_out, cols }, ng))
    }

    /// Max pooling over `k×k` windows with implicit `-inf` padding.
    pub fn max_pool2d(&self, k: usize, stride: usize, pad: usize) -> Result<Var<'t, S>> {
        let xs = self.shape();
        if xs.len() != 4 || stride == 0 || k > xs[2] + 2 * pad || k > xs[3] + 2 * pad || pad >= k {
            return Err(dim_err(format!("max_pool2d: window {k}/{stride}/{pad} on {xs:?}")));
        }
        let window = Window { n: xs[0], c: xs[1], h: xs[2], w: xs[3], k, stride, pad };
        let (out, argmax) = kernels::max_pool(self.node().value.data(), &window);
        self.tape.note_branches(argmax.iter().map(|&i| i as u64));
        let value = Tensor::new(&[xs[0], xs[1], window.out_h(), window.out_w()], out)?;
        Ok(self.emit(value, Op::MaxPool { x: self.id, argmax }, self.needs_grad()))
    }

    /// Mean over each `H×W` plane of an `N×C×H×W` input, giving `N×C`.
    pub fn global_avg_pool(&self) -> Result<Var<'t, S>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(dim_err(format!("global_avg_pool expects N×C×H×W, got {s:?}")));
        }
        self.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2)
    }

    /// Batch normalization with batch statistics over every axis but the
    /// channel axis (axis 1). Returns the output and the statistics used.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t, S>,
        beta: &Var<'t, S>,
        eps: S,
    ) -> Result<(Var<'t, S>, BatchStats<S>)> {
        let shape = self.shape();
        if shape.len() < 2 || gamma.shape() != [shape[1]] || beta.shape() != [shape[1]] {
            return Err(dim_err(format!(
                "batch_norm: input {shape:?}, scale {:?}, shift {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = n * inner;
        let (value, x_hat, inv_std, mean, var) = {
            let x = self.node();
            let xv = x.value.data();
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * inner;
                    mean[ch] += xv[base..base + inner].iter().copied().sum::<S>();
                }
            }
            let cnt = S::of(count as f64);
            mean.iter_mut().for_each(|m| *m /= cnt);
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * inner;
                    var[ch] += xv[base..base + inner].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<S>();
                }
            }
            var.iter_mut().for_each(|v| *v /= cnt);
            let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
            let (gv, bv) = (gamma.node().value.data().to_vec(), beta.node().value.data().to_vec());
            let mut x_hat = vec![S::zero(); xv.len()];
            let mut out = vec![S::zero(); xv.len()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * inner;
                    for i in base..base + inner {
                        x_hat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                        out[i] = gv[ch] * x_hat[i] + bv[ch];
                    }
                }
            }
            (Tensor::new(&shape, out)?, x_hat, inv_std, mean, var)
        };
        let ng = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, x_hat, inv_std };
        Ok((self.emit(value, op, ng), BatchStats { mean, var, count }))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `N×C` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, S>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(dim_err(format!(
                "cross_entropy: logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} out of range for {classes} classes")));
        }
        let (loss, probs) = {
            let x = self.node();
            let probs = softmax_along(x.value.data(), &shape, 1);
            let total: S = labels
                .iter()
                .enumerate()
                .map(|(r, &l)| -log_softmax_at(&x.value.data()[r * classes..(r + 1) * classes], l))
                .sum();
            (total / S::of(labels.len() as f64), probs)
        };
        let op = Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), probs };
        Ok(self.emit(Tensor::scalar(loss), op, self.needs_grad()))
    }
}

fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// `log softmax(row)[idx]` via log-sum-exp.
fn log_softmax_at<S: Scalar>(row: &[S], idx: usize) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
    row[idx] - lse
}

pub(crate) fn softmax_along<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, len, inner) = kernels::split_axis(shape, axis);
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    out
}
