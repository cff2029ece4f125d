//! Named model parameters and their binding to a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Model state that is saved but not optimized (running statistics).
    Buffer,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        self == ParamKind::Trainable
    }
}

/// A tree of named tensors. Names are dot-separated paths and the visiting
/// order is fixed for a given configuration.
pub trait Parameters<S: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>, ParamKind));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind));

    fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t, _| out.push((n.to_string(), t.clone())));
        out
    }

    fn trainable_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t, k| {
            if k.is_trainable() {
                total += t.numel()
            }
        });
        total
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t, k| {
            if k.is_trainable() {
                t.zero_grad()
            }
        });
    }
}

/// Visits `child` with every name prefixed by `prefix.`.
pub fn visit_child<S: Scalar, P: Parameters<S> + ?Sized>(
    prefix: &str,
    child: &P,
    f: &mut dyn FnMut(&str, &Tensor<S>, ParamKind),
) {
    child.visit(&mut |n, t, k| f(&format!("{prefix}.{n}"), t, k));
}

pub fn visit_child_mut<S: Scalar, P: Parameters<S> + ?Sized>(
    prefix: &str,
    child: &mut P,
    f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind),
) {
    child.visit_mut(&mut |n, t, k| f(&format!("{prefix}.{n}"), t, k));
}

fn key<S>(t: &Tensor<S>) -> usize {
    t as *const Tensor<S> as usize
}

/// Records model tensors on a tape, once each, and routes the results of a
/// backward pass and of batch-statistic updates back into the model.
///
/// Tensors are identified by address, so the model must stay in place
/// between binding and [`Binder::commit`].
pub struct Binder<'t, S> {
    tape: &'t Tape<S>,
    trainable: bool,
    bound: RefCell<HashMap<usize, Var<'t, S>>>,
    running: RefCell<HashMap<usize, Tensor<S>>>,
}

impl<'t, S: Scalar> Binder<'t, S> {
    /// Binds parameters as gradient-receiving leaves.
    pub fn new(tape: &'t Tape<S>) -> Self {
        Self::with_mode(tape, true)
    }

    /// Binds parameters as constants.
    pub fn frozen(tape: &'t Tape<S>) -> Self {
        Self::with_mode(tape, false)
    }

    fn with_mode(tape: &'t Tape<S>, trainable: bool) -> Self {
        Self {
            tape,
            trainable,
            bound: RefCell::new(HashMap::new()),
            running: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn var(&self, t: &Tensor<S>) -> Var<'t, S> {
        *self.bound.borrow_mut().entry(key(t)).or_insert_with(|| {
            if self.trainable {
                self.tape.param(t)
            } else {
                self.tape.constant(t.clone())
            }
        })
    }

    pub fn grad_for(&self, t: &Tensor<S>, grads: &Gradients<S>) -> Option<Tensor<S>> {
        let v = *self.bound.borrow().get(&key(t))?;
        grads.wrt(v)
    }

    /// Queues an exponential-moving-average update of running statistics.
    /// The variance estimate is unbiased.
    pub fn record_batch_stats(
        &self,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        stats: &BatchStats<S>,
        momentum: S,
    ) {
        let keep = S::one() - momentum;
        let correction = if stats.count > 1 {
            S::of(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            S::one()
        };
        let mean = Tensor::from_fn(running_mean.shape(), |i| {
            keep * running_mean.data()[i] + momentum * stats.mean[i]
        });
        let var = Tensor::from_fn(running_var.shape(), |i| {
            keep * running_var.data()[i] + momentum * stats.var[i] * correction
        });
        let mut running = self.running.borrow_mut();
        running.insert(key(running_mean), mean);
        running.insert(key(running_var), var);
    }

    /// Adds parameter gradients into each tensor's gradient buffer and applies
    /// queued running-statistic updates.
    pub fn commit<M: Parameters<S> + ?Sized>(&self, model: &mut M, grads: Option<&Gradients<S>>) -> Result<()> {
        let bound = self.bound.borrow();
        let mut running = self.running.borrow_mut();
        let mut result = Ok(());
        model.visit_mut(&mut |_, t, kind| {
            let k = key(t);
            if let Some(update) = running.remove(&k) {
                t.data_mut().copy_from_slice(update.data());
                return;
            }
            if !kind.is_trainable() {
                return;
            }
            let (Some(grads), Some(v)) = (grads, bound.get(&k)) else { return };
            if let Some(g) = grads.raw(v.id) {
                if let Err(e) = t.accumulate_grad(g) {
                    result = Err(e);
                }
            }
        });
        result
    }
}
