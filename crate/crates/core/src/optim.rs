//! Adam with bias-corrected moment estimates.

use crate::error::{dim_err, Error, Result};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First and second moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<S> {
    pub name: String,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Moments<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    /// Restores a state saved after `step` updates.
    pub fn restore(lr: f64, step: u64, moments: Vec<Moments<S>>) -> Self {
        Self { step, moments, ..Self::new(lr) }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[Moments<S>] {
        &self.moments
    }

    fn ensure_moments<'a>(&mut self, shapes: impl Iterator<Item = (String, &'a [usize])>) -> Result<()> {
        let shapes: Vec<_> = shapes.collect();
        if self.moments.is_empty() {
            self.moments = shapes
                .into_iter()
                .map(|(name, s)| Moments { name, m: Tensor::zeros(s), v: Tensor::zeros(s) })
                .collect();
            return Ok(());
        }
        if self.moments.len() != shapes.len() {
            return Err(dim_err(format!(
                "optimizer tracks {} parameters but {} were given",
                self.moments.len(),
                shapes.len()
            )));
        }
        for (mo, (name, s)) in self.moments.iter().zip(&shapes) {
            if mo.m.shape() != *s {
                return Err(dim_err(format!(
                    "moment buffer for {name} has shape {:?}, parameter has {s:?}",
                    mo.m.shape()
                )));
            }
        }
        Ok(())
    }

    /// One update of `params` from `grads`, position by position.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(dim_err(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(dim_err(format!(
                    "parameter {i} has shape {:?} but its gradient has {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.ensure_moments(params.iter().enumerate().map(|(i, p)| (format!("p{i}"), p.shape())))?;
        self.step += 1;
        let coef = self.coefficients();
        for ((p, g), mo) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            update(p.data_mut(), g.data(), mo, coef);
        }
        Ok(())
    }

    /// One update of every trainable tensor in `model` from its gradient
    /// buffer. A missing buffer counts as zero gradient.
    pub fn step_model<M: Parameters<S> + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let mut shapes = Vec::new();
        model.visit(&mut |n, t, k| {
            if k.is_trainable() {
                shapes.push((n.to_string(), t.shape().to_vec()))
            }
        });
        self.ensure_moments(shapes.iter().map(|(n, s)| (n.clone(), s.as_slice())))?;
        self.step += 1;
        let coef = self.coefficients();
        let mut slot = 0;
        let mut bad = None;
        let moments = &mut self.moments;
        model.visit_mut(&mut |name, t, k| {
            if !k.is_trainable() {
                return;
            }
            let mo = &mut moments[slot];
            slot += 1;
            if mo.name != name {
                bad = Some(format!("optimizer slot {} is {} but parameter is {name}", slot - 1, mo.name));
                return;
            }
            let g = t.grad().map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); t.numel()]);
            update(t.data_mut(), &g, mo, coef);
        });
        match bad {
            Some(msg) => Err(Error::Contract(msg)),
            None => Ok(()),
        }
    }

    fn coefficients(&self) -> Coefficients {
        let t = self.step as i32;
        Coefficients {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            correction1: 1.0 - self.beta1.powi(t),
            correction2: 1.0 - self.beta2.powi(t),
        }
    }
}

#[derive(Clone, Copy)]
struct Coefficients {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    correction1: f64,
    correction2: f64,
}

fn update<S: Scalar>(p: &mut [S], g: &[S], mo: &mut Moments<S>, c: Coefficients) {
    let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
    let (one_b1, one_b2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
    let (c1, c2) = (S::of(c.correction1), S::of(c.correction2));
    let (lr, eps) = (S::of(c.lr), S::of(c.eps));
    let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
    for i in 0..p.len() {
        m[i] = b1 * m[i] + one_b1 * g[i];
        v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
