//! Finite-difference verification of tape gradients.
//!
//! Compares analytic gradients from [`Tape::backward`] against central
//! differences `(f(x+δ) − f(x−δ)) / 2δ`, reporting the largest relative error
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
//!
//! Each evaluation fingerprints the branches taken by ReLU and max pooling.
//! When `x ± δ` lands on a different smooth piece than `x`, the difference
//! straddles a kink and says nothing about the derivative, so δ is divided
//! by ten and the coordinate retried, up to [`MAX_REFINEMENTS`] times.

use rand::seq::index;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::SeLrcn;
use crate::params::{Binder, Parameters};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const FLOOR: f64 = 1e-8;
pub const MAX_REFINEMENTS: usize = 4;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub delta: f64,
    /// Checks at most this many randomly chosen coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { delta: 1e-5, max_coords_per_tensor: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name (or input index) and flat coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Coordinates whose step was shrunk to avoid a kink.
    pub refined: usize,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, coord: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), coord));
            self.worst_values = (analytic, numeric);
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        if other.worst.is_some() && (self.worst.is_none() || other.max_rel_error > self.max_rel_error) {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_values = other.worst_values;
        }
        self.checked += other.checked;
        self.refined += other.refined;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Central difference at one coordinate. `eval(h)` evaluates `f` with the
/// coordinate moved by `h` and returns the value and branch fingerprint.
fn central_difference(
    delta: f64,
    base: Option<u64>,
    mut eval: impl FnMut(f64) -> Result<(f64, Option<u64>)>,
) -> Result<(f64, bool)> {
    let mut step = delta;
    for attempt in 0..=MAX_REFINEMENTS {
        let (plus, sp) = eval(step)?;
        let (minus, sm) = eval(-step)?;
        if (sp == base && sm == base) || attempt == MAX_REFINEMENTS {
            return Ok(((plus - minus) / (2.0 * step), attempt > 0));
        }
        step /= 10.0;
    }
    unreachable!("loop returns on its last attempt")
}

fn scalar_of<S: Scalar>(v: &Var<'_, S>) -> Result<f64> {
    v.with_value(|t| {
        if t.numel() == 1 {
            Ok(t.data()[0].to_f64_lossless())
        } else {
            Err(Error::Contract(format!("function must be scalar-valued, got shape {:?}", t.shape())))
        }
    })
}

fn coords(len: usize, limit: Option<usize>, seed: u64, tag: u64) -> Vec<usize> {
    match limit {
        Some(m) if m < len => {
            let mut r = rng::derived(seed, &[tag]);
            let mut picked = index::sample(&mut r, len, m).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

/// Max relative error of `f`'s gradient at `x` with step `delta`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, delta: f64) -> Result<f64>
where
    S: Scalar,
    F: for<'t> Fn(Var<'t, S>) -> Result<Var<'t, S>>,
{
    let opts = GradCheckOptions { delta, ..Default::default() };
    let report = grad_check_inputs(|v| f(v[0]), std::slice::from_ref(x), &opts)?;
    Ok(report.max_rel_error)
}

/// Checks the gradient of `f` with respect to every input tensor.
pub fn grad_check_inputs<S, F>(f: F, inputs: &[Tensor<S>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'t> Fn(&[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    let eval = |values: &[Tensor<S>]| -> Result<(f64, Option<u64>)> {
        let tape = Tape::tracking_branches();
        let vars: Vec<_> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let value = scalar_of(&f(&vars)?)?;
        Ok((value, tape.branch_signature()))
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&vars)?;
    scalar_of(&out)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    let (_, base) = eval(&work)?;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in coords(inputs[k].numel(), opts.max_coords_per_tensor, opts.seed, k as u64) {
            let orig = work[k].data()[i];
            let (numeric, refined) = central_difference(opts.delta, base, |h| {
                work[k].data_mut()[i] = orig + S::of(h);
                let out = eval(&work);
                work[k].data_mut()[i] = orig;
                out
            })?;
            report.refined += usize::from(refined);
            report.record(&format!("input{k}"), i, analytic.data()[i].to_f64_lossless(), numeric);
        }
    }
    Ok(report)
}

/// Checks the gradient of a model loss with respect to every trainable
/// parameter of `model`.
pub fn grad_check_params<S, M, F>(model: &mut M, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    S: Scalar,
    M: Parameters<S>,
    F: for<'t> Fn(&M, &Binder<'t, S>) -> Result<Var<'t, S>>,
{
    let eval = |m: &M| -> Result<(f64, Option<u64>)> {
        let tape = Tape::tracking_branches();
        let binder = Binder::frozen(&tape);
        let value = scalar_of(&f(m, &binder)?)?;
        Ok((value, tape.branch_signature()))
    };

    let analytic: Vec<(String, Tensor<S>)> = {
        let tape = Tape::new();
        let binder = Binder::new(&tape);
        let out = f(model, &binder)?;
        scalar_of(&out)?;
        let grads = tape.backward(out)?;
        let mut found = Vec::new();
        model.visit(&mut |name, t, kind| {
            if kind.is_trainable() {
                let g = binder.grad_for(t, &grads).unwrap_or_else(|| Tensor::zeros(t.shape()));
                found.push((name.to_string(), g));
            }
        });
        found
    };

    let mut report = GradCheckReport::default();
    let (_, base) = eval(model)?;
    for (tag, (name, grad)) in analytic.iter().enumerate() {
        let mut part = GradCheckReport::default();
        for i in coords(grad.numel(), opts.max_coords_per_tensor, opts.seed, tag as u64) {
            let orig = nudge(model, name, i, None);
            let (numeric, refined) = central_difference(opts.delta, base, |h| {
                nudge(model, name, i, Some(orig + S::of(h)));
                let out = eval(model);
                nudge(model, name, i, Some(orig));
                out
            })?;
            part.refined += usize::from(refined);
            part.record(name, i, grad.data()[i].to_f64_lossless(), numeric);
        }
        report.merge(part);
    }
    Ok(report)
}

/// Checks every parameter gradient of a whole SE-LRCN model (CNN, sequence
/// model, head and per-frame loss) in 64-bit arithmetic. The model is built
/// from `cfg` with 4 classes and fed two random segments in training mode,
/// so batch statistics and a fixed dropout mask take part.
pub fn model_grad_check(cfg: &TrainConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    const CLASSES: usize = 4;
    cfg.validate()?;
    let seed = cfg.seed;
    let model_cfg = cfg.model_config(CLASSES);
    let mut model = SeLrcn::<f64>::new(model_cfg, &mut rng::derived(seed, &[1]))?;
    let side = model_cfg.frame_size();
    let x = Tensor::randn(&[2, model_cfg.segment_len(), 3, side, side], 1.0, &mut rng::derived(seed, &[2]));
    let labels = [1, 3];
    grad_check_params(
        &mut model,
        |m, binder| {
            let mut drop = rng::derived(seed, &[3]);
            let out = m.forward(&x, binder, Mode::Train, &mut drop)?;
            m.loss(&out.logits, &labels)
        },
        opts,
    )
}

/// Reads coordinate `i` of parameter `name`, optionally overwriting it.
/// Returns the value before any write.
fn nudge<S: Scalar, M: Parameters<S>>(model: &mut M, name: &str, i: usize, set: Option<S>) -> S {
    let mut old = None;
    model.visit_mut(&mut |n, t, _| {
        if n == name {
            old = Some(t.data()[i]);
            if let Some(v) = set {
                t.data_mut()[i] = v;
            }
        }
    });
    old.expect("parameter present")
}
