//! Squeeze, excitation and reweight primitives.
//!
//! Every function accepts an optional leading batch axis: spatial inputs are
//! `C×H×W` or `N×C×H×W`, sequences are `T×C` or `B×T×C`, and gate vectors
//! carry the same leading axis as their input.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamKind, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which axis a squeeze averages away.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SqueezeAxis {
    /// Mean over the `H×W` plane, one value per feature channel.
    Spatial,
    /// Mean over channels, one value per frame.
    Channel,
    /// Mean over frames, one value per channel.
    Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReweightMode {
    /// `s ⊙ U`
    ScaleOnly,
    /// `U + s ⊙ U`
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeConfig {
    pub reduction_ratio: usize,
    pub squeeze_axis: SqueezeAxis,
    pub reweight_mode: ReweightMode,
}

impl SeConfig {
    pub fn spatial() -> Self {
        Self { reduction_ratio: 16, squeeze_axis: SqueezeAxis::Spatial, reweight_mode: ReweightMode::Residual }
    }

    pub fn temporal() -> Self {
        Self { reduction_ratio: 16, squeeze_axis: SqueezeAxis::Channel, reweight_mode: ReweightMode::Residual }
    }

    /// `max(1, floor(d / r))`.
    pub fn hidden_dim(&self, d: usize) -> Result<usize> {
        if self.reduction_ratio == 0 {
            return Err(Error::Input("reduction ratio must be at least 1".into()));
        }
        if d == 0 {
            return Err(dim_err("squeezed length must be positive"));
        }
        Ok((d / self.reduction_ratio).max(1))
    }
}

impl Default for SeConfig {
    fn default() -> Self {
        Self::spatial()
    }
}

/// Bias-free excitation weights: `w1` is `hidden×d`, `w2` is `d×hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeWeights<S> {
    pub w1: Tensor<S>,
    pub w2: Tensor<S>,
}

impl<S: Scalar> SeWeights<S> {
    /// Uniform `±1/√fan_in` initialization.
    pub fn init<R: Rng + ?Sized>(d: usize, cfg: &SeConfig, rng: &mut R) -> Result<Self> {
        let h = cfg.hidden_dim(d)?;
        let b1 = 1.0 / (d as f64).sqrt();
        let b2 = 1.0 / (h as f64).sqrt();
        Ok(Self { w1: Tensor::uniform(&[h, d], -b1, b1, rng), w2: Tensor::uniform(&[d, h], -b2, b2, rng) })
    }

    pub fn zeros(d: usize, cfg: &SeConfig) -> Result<Self> {
        let h = cfg.hidden_dim(d)?;
        Ok(Self { w1: Tensor::zeros(&[h, d]), w2: Tensor::zeros(&[d, h]) })
    }

    /// Length of the gate vector these weights produce.
    pub fn dim(&self) -> usize {
        self.w1.shape()[1]
    }
}

impl<S: Scalar> Parameters<S> for SeWeights<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>, ParamKind)) {
        f("w1", &self.w1, ParamKind::Trainable);
        f("w2", &self.w2, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        f("w1", &mut self.w1, ParamKind::Trainable);
        f("w2", &mut self.w2, ParamKind::Trainable);
    }
}

/// A `T×C` matrix of per-frame feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<S> {
    values: Tensor<S>,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(values: Tensor<S>) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(dim_err(format!("feature sequence must be T×C, got {:?}", values.shape())));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<S> {
        self.values
    }
}

/// Per-channel mean over the spatial plane.
pub fn squeeze_spatial<'t, S: Scalar>(u: &Var<'t, S>) -> Result<Var<'t, S>> {
    let s = u.shape();
    match s.len() {
        3 => u.reshape(&[1, s[0], s[1], s[2]])?.global_avg_pool()?.reshape(&[s[0]]),
        4 => u.global_avg_pool(),
        _ => Err(dim_err(format!("spatial squeeze expects C×H×W or N×C×H×W, got {s:?}"))),
    }
}

/// `σ(W2 · relu(W1 · z))` applied to each row of `z`.
pub fn excitation<'t, S: Scalar>(z: &Var<'t, S>, w1: &Var<'t, S>, w2: &Var<'t, S>) -> Result<Var<'t, S>> {
    let (zs, s1, s2) = (z.shape(), w1.shape(), w2.shape());
    let d = *zs.last().unwrap_or(&0);
    let ok = (zs.len() == 1 || zs.len() == 2)
        && s1.len() == 2
        && s1[1] == d
        && s2 == [s1[1], s1[0]];
    if !ok {
        return Err(dim_err(format!("excitation: input {zs:?}, W1 {s1:?}, W2 {s2:?}")));
    }
    let rows = if zs.len() == 1 { z.reshape(&[1, d])? } else { *z };
    let hidden = rows.matmul(&w1.t()?)?.relu();
    let gates = hidden.matmul(&w2.t()?)?.sigmoid();
    if zs.len() == 1 {
        gates.reshape(&[d])
    } else {
        Ok(gates)
    }
}

/// `u_prev + s_c · u_cur` with `s` broadcast over each channel plane.
pub fn reweight_residual<'t, S: Scalar>(
    u_prev: &Var<'t, S>,
    u_cur: &Var<'t, S>,
    s: &Var<'t, S>,
) -> Result<Var<'t, S>> {
    let (ps, cs, ss) = (u_prev.shape(), u_cur.shape(), s.shape());
    let (gate_shape, expected) = match cs.len() {
        3 => (vec![cs[0], 1, 1], vec![cs[0]]),
        4 => (vec![cs[0], cs[1], 1, 1], vec![cs[0], cs[1]]),
        _ => (vec![], vec![]),
    };
    if ps != cs || gate_shape.is_empty() || ss != expected {
        return Err(dim_err(format!("reweight: u_prev {ps:?}, u_cur {cs:?}, s {ss:?}")));
    }
    let scaled = u_cur.broadcast_mul(&s.reshape(&gate_shape)?)?;
    u_prev.add(&scaled)
}

fn check_sequence(u: &[usize]) -> Result<()> {
    if u.len() == 2 || u.len() == 3 {
        Ok(())
    } else {
        Err(dim_err(format!("sequence must be T×C or B×T×C, got {u:?}")))
    }
}

/// Mean over channels: one value per frame.
pub fn squeeze_frames<'t, S: Scalar>(u: &Var<'t, S>) -> Result<Var<'t, S>> {
    let s = u.shape();
    check_sequence(&s)?;
    u.mean_axis(s.len() - 1)
}

/// Mean over frames: one value per channel.
pub fn squeeze_channels<'t, S: Scalar>(u: &Var<'t, S>) -> Result<Var<'t, S>> {
    let s = u.shape();
    check_sequence(&s)?;
    u.mean_axis(s.len() - 2)
}

/// Squeeze along the axis `cfg` names.
pub fn squeeze_sequence<'t, S: Scalar>(u: &Var<'t, S>, cfg: &SeConfig) -> Result<Var<'t, S>> {
    match cfg.squeeze_axis {
        SqueezeAxis::Channel => squeeze_frames(u),
        SqueezeAxis::Time => squeeze_channels(u),
        SqueezeAxis::Spatial => Err(Error::Input("a sequence cannot be squeezed spatially".into())),
    }
}

/// Scales each frame (gates of length `T`) or each channel (length `C`).
///
/// The gate axis follows `cfg.squeeze_axis` and falls back to whichever
/// axis the gate length matches.
pub fn reweight_sequence<'t, S: Scalar>(u: &Var<'t, S>, s: &Var<'t, S>, cfg: &SeConfig) -> Result<Var<'t, S>> {
    let us = u.shape();
    check_sequence(&us)?;
    let ss = s.shape();
    let batched = us.len() == 3;
    let (lead, t, c) = if batched { (&us[..1], us[1], us[2]) } else { (&us[..0], us[0], us[1]) };
    let gate_len = match (ss.len(), batched) {
        (1, false) => Some(ss[0]),
        (2, true) if ss[0] == us[0] => Some(ss[1]),
        _ => None,
    };
    let per_frame = match (gate_len, cfg.squeeze_axis) {
        (Some(n), SqueezeAxis::Channel) if n == t => true,
        (Some(n), SqueezeAxis::Time) if n == c => false,
        (Some(n), _) if n == t => true,
        (Some(n), _) if n == c => false,
        _ => return Err(dim_err(format!("gates {ss:?} match neither axis of sequence {us:?}"))),
    };
    let mut gate_shape = lead.to_vec();
    if per_frame {
        gate_shape.extend([t, 1]);
    } else {
        gate_shape.extend([1, c]);
    }
    let scaled = u.broadcast_mul(&s.reshape(&gate_shape)?)?;
    match cfg.reweight_mode {
        ReweightMode::ScaleOnly => Ok(scaled),
        ReweightMode::Residual => u.add(&scaled),
    }
}

/// Squeeze, excite and reweight a sequence. Returns the recalibrated
/// sequence and the gates.
pub fn recalibrate_sequence<'t, S: Scalar>(
    u: &Var<'t, S>,
    w1: &Var<'t, S>,
    w2: &Var<'t, S>,
    cfg: &SeConfig,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let z = squeeze_sequence(u, cfg)?;
    let s = excitation(&z, w1, w2)?;
    Ok((reweight_sequence(u, &s, cfg)?, s))
}
