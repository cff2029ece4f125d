//! Stacked LSTM with sequence recalibration ahead of the first layer.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{dim_err, Error, Result};
use crate::layers::{dropout, Linear, Mode};
use crate::params::{visit_child, visit_child_mut, Binder, ParamKind, Parameters};
use crate::scalar::Scalar;
use crate::se::{self, SeConfig, SeWeights, SqueezeAxis};
use crate::tensor::Tensor;

/// One LSTM layer. Gate blocks are stacked in the order input, forget,
/// cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer<S> {
    /// `4H×D`
    pub w_ih: Tensor<S>,
    /// `4H×H`
    pub w_hh: Tensor<S>,
    /// `4H`, forget block initialized to 1.
    pub bias: Tensor<S>,
}

impl<S: Scalar> LstmLayer<S> {
    /// Uniform `±1/√H` weights, zero biases except the forget block.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let b = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Tensor::uniform(&[4 * hidden, input], -b, b, rng),
            w_hh: Tensor::uniform(&[4 * hidden, hidden], -b, b, rng),
            bias: Tensor::from_fn(&[4 * hidden], |i| {
                if (hidden..2 * hidden).contains(&i) {
                    S::one()
                } else {
                    S::zero()
                }
            }),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[1]
    }
}

impl<S: Scalar> Parameters<S> for LstmLayer<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>, ParamKind)) {
        f("w_ih", &self.w_ih, ParamKind::Trainable);
        f("w_hh", &self.w_hh, ParamKind::Trainable);
        f("bias", &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        f("w_ih", &mut self.w_ih, ParamKind::Trainable);
        f("w_hh", &mut self.w_hh, ParamKind::Trainable);
        f("bias", &mut self.bias, ParamKind::Trainable);
    }
}

/// Completes one step from precomputed input projections `x Wᵢₕᵀ + b`
/// (`B×4H`).
fn cell_from_projection<'t, S: Scalar>(
    x_proj: &Var<'t, S>,
    h_prev: &Var<'t, S>,
    c_prev: &Var<'t, S>,
    w_hh: &Var<'t, S>,
    hidden: usize,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let gates = x_proj.add(&h_prev.matmul(&w_hh.t()?)?)?;
    let i = gates.slice(1, 0, hidden)?.sigmoid();
    let f = gates.slice(1, hidden, hidden)?.sigmoid();
    let g = gates.slice(1, 2 * hidden, hidden)?.tanh();
    let o = gates.slice(1, 3 * hidden, hidden)?.sigmoid();
    let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
    let h = o.mul(&c.tanh())?;
    Ok((h, c))
}

/// One LSTM step on a batch: `x_t` is `B×D`, the states are `B×H`.
pub fn lstm_cell_step<'t, S: Scalar>(
    x_t: &Var<'t, S>,
    h_prev: &Var<'t, S>,
    c_prev: &Var<'t, S>,
    layer: &LstmLayer<S>,
    binder: &Binder<'t, S>,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let hidden = layer.hidden();
    let (xs, hs, cs) = (x_t.shape(), h_prev.shape(), c_prev.shape());
    if xs.len() != 2 || xs[1] != layer.input() || hs != [xs[0], hidden] || cs != hs {
        return Err(dim_err(format!(
            "lstm step: x {xs:?}, h {hs:?}, c {cs:?} for a {}→{hidden} layer",
            layer.input()
        )));
    }
    let bias = binder.var(&layer.bias).reshape(&[1, 4 * hidden])?;
    let proj = x_t.matmul(&binder.var(&layer.w_ih).t()?)?.broadcast_add(&bias)?;
    cell_from_projection(&proj, h_prev, c_prev, &binder.var(&layer.w_hh), hidden)
}

/// Runs one layer over a `B×T×D` sequence from zero state, returning the
/// hidden states `B×T×H`.
pub fn lstm_layer_forward<'t, S: Scalar>(
    x: &Var<'t, S>,
    layer: &LstmLayer<S>,
    binder: &Binder<'t, S>,
) -> Result<Var<'t, S>> {
    let xs = x.shape();
    let hidden = layer.hidden();
    if xs.len() != 3 || xs[2] != layer.input() {
        return Err(dim_err(format!("lstm layer expects B×T×{}, got {xs:?}", layer.input())));
    }
    let (b, t, d) = (xs[0], xs[1], xs[2]);
    let bias = binder.var(&layer.bias).reshape(&[1, 4 * hidden])?;
    let proj = x
        .reshape(&[b * t, d])?
        .matmul(&binder.var(&layer.w_ih).t()?)?
        .broadcast_add(&bias)?
        .reshape(&[b, t, 4 * hidden])?;
    let w_hh = binder.var(&layer.w_hh);
    let tape = binder.tape();
    let mut h = tape.constant(Tensor::zeros(&[b, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[b, hidden]));
    let mut outputs = Vec::with_capacity(t);
    for step in 0..t {
        let p = proj.slice(1, step, 1)?.reshape(&[b, 4 * hidden])?;
        (h, c) = cell_from_projection(&p, &h, &c, &w_hh, hidden)?;
        outputs.push(h);
    }
    Var::stack(&outputs, 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeLstmConfig {
    pub input_dim: usize,
    /// Frames per segment; the gate length when squeezing over channels.
    pub seq_len: usize,
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub se_enabled: bool,
    pub se: SeConfig,
    pub classes: usize,
}

impl SeLstmConfig {
    pub fn full(classes: usize) -> Self {
        Self {
            input_dim: 512,
            seq_len: 30,
            layers: 3,
            hidden: 1024,
            dropout: 0.5,
            se_enabled: true,
            se: SeConfig::temporal(),
            classes,
        }
    }

    pub fn tiny(classes: usize) -> Self {
        let se = SeConfig { reduction_ratio: 2, ..SeConfig::temporal() };
        Self { input_dim: 64, seq_len: 10, layers: 2, hidden: 32, se, ..Self::full(classes) }
    }

    /// Length of the squeezed vector the excitation sees.
    pub fn gate_dim(&self) -> Result<usize> {
        match self.se.squeeze_axis {
            SqueezeAxis::Channel => Ok(self.seq_len),
            SqueezeAxis::Time => Ok(self.input_dim),
            SqueezeAxis::Spatial => Err(Error::Input("sequence SE cannot squeeze spatially".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeLstm<S> {
    pub cfg: SeLstmConfig,
    pub se: Option<SeWeights<S>>,
    pub layers: Vec<LstmLayer<S>>,
    pub head: Linear<S>,
}

impl<S: Scalar> SeLstm<S> {
    pub fn new<R: Rng + ?Sized>(cfg: SeLstmConfig, rng: &mut R) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 || cfg.classes == 0 || cfg.input_dim == 0 || cfg.seq_len == 0 {
            return Err(Error::Input(format!("invalid LSTM configuration {cfg:?}")));
        }
        let se = if cfg.se_enabled { Some(SeWeights::init(cfg.gate_dim()?, &cfg.se, rng)?) } else { None };
        let layers = (0..cfg.layers)
            .map(|l| LstmLayer::init(if l == 0 { cfg.input_dim } else { cfg.hidden }, cfg.hidden, rng))
            .collect();
        let head = Linear::init(cfg.hidden, cfg.classes, rng);
        Ok(Self { cfg, se, layers, head })
    }

    /// Applies the sequence SE (when enabled) to `B×T×C` features. Returns
    /// the recalibrated sequence and the gates.
    pub fn recalibrate<'t>(
        &self,
        u: &Var<'t, S>,
        binder: &Binder<'t, S>,
    ) -> Result<(Var<'t, S>, Option<Var<'t, S>>)> {
        match &self.se {
            Some(w) => {
                let (out, gates) =
                    se::recalibrate_sequence(u, &binder.var(&w.w1), &binder.var(&w.w2), &self.cfg.se)?;
                Ok((out, Some(gates)))
            }
            None => Ok((*u, None)),
        }
    }

    /// Top-layer hidden states `B×T×H` and the SE gates.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        u: &Var<'t, S>,
        binder: &Binder<'t, S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var<'t, S>, Option<Var<'t, S>>)> {
        let us = u.shape();
        if us.len() != 3 || us[2] != self.cfg.input_dim {
            return Err(dim_err(format!(
                "LSTM expects B×T×{} features, got {us:?}",
                self.cfg.input_dim
            )));
        }
        let (mut h, gates) = self.recalibrate(u, binder)?;
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                h = dropout(&h, self.cfg.dropout, mode, rng)?;
            }
            h = lstm_layer_forward(&h, layer, binder)?;
        }
        Ok((h, gates))
    }

    /// Per-frame logits `B×T×K` from hidden states, after dropout.
    pub fn logits<'t, R: Rng + ?Sized>(
        &self,
        h: &Var<'t, S>,
        binder: &Binder<'t, S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var<'t, S>> {
        let hs = h.shape();
        let h = dropout(h, self.cfg.dropout, mode, rng)?;
        let flat = h.reshape(&[hs[0] * hs[1], hs[2]])?;
        self.head.forward(&flat, binder)?.reshape(&[hs[0], hs[1], self.cfg.classes])
    }
}

impl<S: Scalar> Parameters<S> for SeLstm<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>, ParamKind)) {
        if let Some(se) = &self.se {
            visit_child("se", se, f);
        }
        for (l, layer) in self.layers.iter().enumerate() {
            visit_child(&format!("layer{l}"), layer, f);
        }
        visit_child("head", &self.head, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        if let Some(se) = &mut self.se {
            visit_child_mut("se", se, f);
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            visit_child_mut(&format!("layer{l}"), layer, f);
        }
        visit_child_mut("head", &mut self.head, f);
    }
}

/// Softmax over the class axis of `T×H` hidden states projected by `head`.
pub fn classify_frames<S: Scalar>(h: &Tensor<S>, head: &Linear<S>) -> Result<Tensor<S>> {
    let tape = crate::autodiff::Tape::new();
    let binder = Binder::frozen(&tape);
    let logits = head.forward(&tape.constant(h.clone()), &binder)?;
    Ok(logits.softmax(1)?.value())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Mean,
    /// Columnwise maximum, renormalized to sum 1.
    Max,
}

/// Sum that does not depend on the order of `values`.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values.iter() {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Fuses `T×K` per-frame distributions into one `K` distribution.
pub fn late_fuse<S: Scalar>(per_frame: &Tensor<S>, mode: Fusion) -> Result<Tensor<S>> {
    let s = per_frame.shape();
    if s.len() != 2 {
        return Err(dim_err(format!("per-frame scores must be T×K, got {s:?}")));
    }
    let (t, k) = (s[0], s[1]);
    let column = |c: usize| -> Vec<f64> { (0..t).map(|r| per_frame.data()[r * k + c].to_f64_lossless()).collect() };
    let fused: Vec<f64> = match mode {
        Fusion::Mean => (0..k).map(|c| order_free_sum(&mut column(c)) / t as f64).collect(),
        Fusion::Max => {
            let maxes: Vec<f64> = (0..k).map(|c| column(c).into_iter().fold(f64::NEG_INFINITY, f64::max)).collect();
            let total = order_free_sum(&mut maxes.clone());
            maxes.iter().map(|m| m / total).collect()
        }
    };
    Tensor::from_f64(&[k], &fused)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult<S> {
    /// `T×K` probability rows.
    pub per_frame: Tensor<S>,
    pub fused: Tensor<S>,
    pub predicted_class: usize,
}

impl<S: Scalar> PredictionResult<S> {
    pub fn from_per_frame(per_frame: Tensor<S>, mode: Fusion) -> Result<Self> {
        let fused = late_fuse(&per_frame, mode)?;
        let predicted_class = argmax(fused.data());
        Ok(Self { per_frame, fused, predicted_class })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forget_bias_starts_at_one() {
        let mut r = crate::rng::seeded(0);
        let layer = LstmLayer::<f64>::init(3, 4, &mut r);
        let b = layer.bias.data();
        assert!(b[..4].iter().all(|&v| v == 0.0));
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn order_free_sum_is_permutation_invariant() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 0.1, 0.2];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(order_free_sum(&mut a).to_bits(), order_free_sum(&mut b).to_bits());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.25f32, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[0.3f64, 0.3, 0.3]), 0);
    }

    #[test]
    fn gate_dim_follows_axis() {
        let mut cfg = SeLstmConfig::tiny(4);
        assert_eq!(cfg.gate_dim().unwrap(), 10);
        cfg.se.squeeze_axis = SqueezeAxis::Time;
        assert_eq!(cfg.gate_dim().unwrap(), 64);
    }
}
