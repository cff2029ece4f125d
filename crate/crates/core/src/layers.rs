//! Layers shared by the convolutional and recurrent halves of the model.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{dim_err, Result};
use crate::params::{Binder, ParamKind, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active, random augmentation.
    Train,
    /// Running statistics, no dropout, deterministic preprocessing.
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Per-channel normalization over axis 1 with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub eps: f64,
    pub momentum: f64,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward<'t>(&self, x: &Var<'t, S>, binder: &Binder<'t, S>, mode: Mode) -> Result<Var<'t, S>> {
        let gamma = binder.var(&self.gamma);
        let beta = binder.var(&self.beta);
        if mode.is_train() {
            let (y, stats) = x.batch_norm(&gamma, &beta, S::of(self.eps))?;
            binder.record_batch_stats(&self.running_mean, &self.running_var, &stats, S::of(self.momentum));
            return Ok(y);
        }
        let shape = x.shape();
        let c = self.channels();
        if shape.len() < 2 || shape[1] != c {
            return Err(dim_err(format!("batch norm over {c} channels given input {shape:?}")));
        }
        let eps = S::of(self.eps);
        let inv_std = Tensor::from_fn(&[c], |i| S::one() / (self.running_var.data()[i] + eps).sqrt());
        let tape = binder.tape();
        let scale = gamma.mul(&tape.constant(inv_std))?;
        let shift = beta.sub(&scale.mul(&tape.constant(self.running_mean.clone()))?)?;
        let mut bshape = vec![1; shape.len()];
        bshape[1] = c;
        x.broadcast_mul(&scale.reshape(&bshape)?)?.broadcast_add(&shift.reshape(&bshape)?)
    }
}

impl<S: Scalar> Parameters<S> for BatchNorm<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>, ParamKind)) {
        f("gamma", &self.gamma, ParamKind::Trainable);
        f("beta", &self.beta, ParamKind::Trainable);
        f("running_mean", &self.running_mean, ParamKind::Buffer);
        f("running_var", &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        f("gamma", &mut self.gamma, ParamKind::Trainable);
        f("beta", &mut self.beta, ParamKind::Trainable);
        f("running_mean", &mut self.running_mean, ParamKind::Buffer);
        f("running_var", &mut self.running_var, ParamKind::Buffer);
    }
}

/// `y = x Wᵀ + b` for `N×D` inputs, with `W` of shape `K×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    /// Uniform `±1/√fan_in` for weight and bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let b = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[outputs, inputs], -b, b, rng),
            bias: Tensor::uniform(&[outputs], -b, b, rng),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t, S>, binder: &Binder<'t, S>) -> Result<Var<'t, S>> {
        let w = binder.var(&self.weight);
        let b = binder.var(&self.bias);
        let k = self.bias.numel();
        x.matmul(&w.t()?)?.broadcast_add(&b.reshape(&[1, k])?)
    }
}

impl<S: Scalar> Parameters<S> for Linear<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>, ParamKind)) {
        f("weight", &self.weight, ParamKind::Trainable);
        f("bias", &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        f("weight", &mut self.weight, ParamKind::Trainable);
        f("bias", &mut self.bias, ParamKind::Trainable);
    }
}

/// Normal initialization with standard deviation `√(2 / fan_in)`.
pub fn conv_init<S: Scalar, R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Tensor<S> {
    let fan_in = (c_in * k * k) as f64;
    Tensor::randn(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng)
}

/// Inverted dropout: kept entries are scaled by `1/(1-p)`. Identity unless
/// training with `p > 0`.
pub fn dropout<'t, S: Scalar, R: Rng + ?Sized>(x: &Var<'t, S>, p: f64, mode: Mode, rng: &mut R) -> Result<Var<'t, S>> {
    if !mode.is_train() || p <= 0.0 {
        return Ok(*x);
    }
    let keep = 1.0 - p;
    let scale = S::of(1.0 / keep);
    let mask = Tensor::from_fn(&x.shape(), |_| if rng.random::<f64>() < keep { scale } else { S::zero() });
    x.mul(&x.tape().constant(mask))
}
