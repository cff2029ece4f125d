//! Residual CNN with channel recalibration on its final block.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::layers::{conv_init, BatchNorm, Mode};
use crate::params::{visit_child, visit_child_mut, Binder, ParamKind, Parameters};
use crate::scalar::Scalar;
use crate::se::{self, FeatureSequence, SeConfig, SeWeights};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Follows the stem with a 3×3 stride-2 max pool.
    pub max_pool: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeResNetConfig {
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub in_channels: usize,
    pub stem: StemConfig,
    pub se_enabled: bool,
    pub se: SeConfig,
    pub input_size: usize,
}

impl SeResNetConfig {
    pub fn resnet34() -> Self {
        Self {
            stage_blocks: [3, 4, 6, 3],
            stage_channels: [64, 128, 256, 512],
            in_channels: 3,
            stem: StemConfig { kernel: 7, stride: 2, pad: 3, max_pool: true },
            se_enabled: true,
            se: SeConfig::spatial(),
            input_size: 224,
        }
    }

    pub fn tiny() -> Self {
        Self {
            stage_blocks: [1, 1, 1, 1],
            stage_channels: [8, 16, 32, 64],
            in_channels: 3,
            stem: StemConfig { kernel: 3, stride: 1, pad: 1, max_pool: false },
            se_enabled: true,
            se: SeConfig::spatial(),
            input_size: 16,
        }
    }

    pub fn with_se(mut self, enabled: bool) -> Self {
        self.se_enabled = enabled;
        self
    }

    /// Length of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.stage_channels[3]
    }

    /// Side length of the final feature maps for a square input of `size`.
    pub fn final_map_size(&self, size: usize) -> usize {
        let conv = |s: usize, k: usize, stride: usize, pad: usize| (s + 2 * pad - k) / stride + 1;
        let mut s = conv(size, self.stem.kernel, self.stem.stride, self.stem.pad);
        if self.stem.max_pool {
            s = conv(s, 3, 2, 1);
        }
        for _ in 1..4 {
            s = conv(s, 3, 2, 1);
        }
        s
    }
}

/// Weights of one two-convolution residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<S> {
    pub conv1: Tensor<S>,
    pub bn1: BatchNorm<S>,
    pub conv2: Tensor<S>,
    pub bn2: BatchNorm<S>,
    /// 1×1 shortcut projection, present when the block changes shape.
    pub projection: Option<(Tensor<S>, BatchNorm<S>)>,
    pub stride: usize,
    pub se: Option<SeWeights<S>>,
}

impl<S: Scalar> BlockParams<S> {
    pub fn init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        stride: usize,
        se: Option<&SeConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        let projection =
            (stride != 1 || c_in != c_out).then(|| (conv_init(c_out, c_in, 1, rng), BatchNorm::new(c_out)));
        Ok(Self {
            conv1: conv_init(c_out, c_in, 3, rng),
            bn1: BatchNorm::new(c_out),
            conv2: conv_init(c_out, c_out, 3, rng),
            bn2: BatchNorm::new(c_out),
            projection,
            stride,
            se: se.map(|cfg| SeWeights::init(c_out, cfg, rng)).transpose()?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.shape()[0]
    }
}

impl<S: Scalar> Parameters<S> for BlockParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>, ParamKind)) {
        f("conv1", &self.conv1, ParamKind::Trainable);
        visit_child("bn1", &self.bn1, f);
        f("conv2", &self.conv2, ParamKind::Trainable);
        visit_child("bn2", &self.bn2, f);
        if let Some((w, bn)) = &self.projection {
            f("proj", w, ParamKind::Trainable);
            visit_child("proj_bn", bn, f);
        }
        if let Some(se) = &self.se {
            visit_child("se", se, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        f("conv1", &mut self.conv1, ParamKind::Trainable);
        visit_child_mut("bn1", &mut self.bn1, f);
        f("conv2", &mut self.conv2, ParamKind::Trainable);
        visit_child_mut("bn2", &mut self.bn2, f);
        if let Some((w, bn)) = &mut self.projection {
            f("proj", w, ParamKind::Trainable);
            visit_child_mut("proj_bn", bn, f);
        }
        if let Some(se) = &mut self.se {
            visit_child_mut("se", se, f);
        }
    }
}

/// `relu(shortcut(x) + branch(x))`, where an attached SE rescales the branch
/// channelwise before the addition.
pub fn basic_block_forward<'t, S: Scalar>(
    x: &Var<'t, S>,
    block: &BlockParams<S>,
    binder: &Binder<'t, S>,
    mode: Mode,
) -> Result<Var<'t, S>> {
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != block.in_channels() {
        return Err(dim_err(format!(
            "block expects N×{}×H×W input, got {xs:?}",
            block.in_channels()
        )));
    }
    let h = x.conv2d(&binder.var(&block.conv1), block.stride, 1)?;
    let h = block.bn1.forward(&h, binder, mode)?.relu();
    let h = h.conv2d(&binder.var(&block.conv2), 1, 1)?;
    let branch = block.bn2.forward(&h, binder, mode)?;
    let shortcut = match &block.projection {
        Some((w, bn)) => bn.forward(&x.conv2d(&binder.var(w), block.stride, 0)?, binder, mode)?,
        None => *x,
    };
    let sum = match &block.se {
        Some(se_w) => {
            let z = se::squeeze_spatial(&branch)?;
            let s = se::excitation(&z, &binder.var(&se_w.w1), &binder.var(&se_w.w2))?;
            se::reweight_residual(&shortcut, &branch, &s)?
        }
        None => shortcut.add(&branch)?,
    };
    Ok(sum.relu())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeResNet<S> {
    pub cfg: SeResNetConfig,
    pub stem_conv: Tensor<S>,
    pub stem_bn: BatchNorm<S>,
    /// Blocks grouped by stage.
    pub stages: Vec<Vec<BlockParams<S>>>,
}

impl<S: Scalar> SeResNet<S> {
    pub fn new<R: Rng + ?Sized>(cfg: SeResNetConfig, rng: &mut R) -> Result<Self> {
        let c0 = cfg.stage_channels[0];
        let stem_conv = conv_init(c0, cfg.in_channels, cfg.stem.kernel, rng);
        let mut stages = Vec::with_capacity(4);
        let mut c_in = c0;
        for (stage, (&count, &c_out)) in cfg.stage_blocks.iter().zip(&cfg.stage_channels).enumerate() {
            let mut blocks = Vec::with_capacity(count);
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let last = stage == 3 && b + 1 == count;
                let se = (cfg.se_enabled && last).then_some(&cfg.se);
                blocks.push(BlockParams::init(c_in, c_out, stride, se, rng)?);
                c_in = c_out;
            }
            stages.push(blocks);
        }
        Ok(Self { cfg, stem_conv, stem_bn: BatchNorm::new(c0), stages })
    }

    /// The block carrying the SE weights, if enabled.
    pub fn se_block(&self) -> Option<&BlockParams<S>> {
        self.stages.last()?.last().filter(|b| b.se.is_some())
    }

    /// Final feature maps before pooling, `N×C×h×w`.
    pub fn forward_maps<'t>(&self, x: &Var<'t, S>, binder: &Binder<'t, S>, mode: Mode) -> Result<Var<'t, S>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.cfg.in_channels {
            return Err(dim_err(format!(
                "network expects N×{}×H×W frames, got {xs:?}",
                self.cfg.in_channels
            )));
        }
        let stem = self.cfg.stem;
        let h = x.conv2d(&binder.var(&self.stem_conv), stem.stride, stem.pad)?;
        let mut h = self.stem_bn.forward(&h, binder, mode)?.relu();
        if stem.max_pool {
            h = h.max_pool2d(3, 2, 1)?;
        }
        for block in self.stages.iter().flatten() {
            h = basic_block_forward(&h, block, binder, mode)?;
        }
        Ok(h)
    }

    /// Pooled features `N×C` for a batch of frames `N×3×H×W`.
    pub fn forward<'t>(&self, x: &Var<'t, S>, binder: &Binder<'t, S>, mode: Mode) -> Result<Var<'t, S>> {
        self.forward_maps(x, binder, mode)?.global_avg_pool()
    }

    /// Feature vector of one `3×H×W` frame in evaluation mode.
    pub fn frame_features(&self, frame: &Tensor<S>) -> Result<Tensor<S>> {
        let s = frame.shape();
        if s.len() != 3 {
            return Err(dim_err(format!("frame must be C×H×W, got {s:?}")));
        }
        let tape = Tape::new();
        let binder = Binder::frozen(&tape);
        let x = tape.constant(frame.reshape(&[1, s[0], s[1], s[2]])?);
        self.forward(&x, &binder, Mode::Eval)?.value().reshape(&[self.cfg.feature_dim()])
    }

    /// Row `t` of the result is the feature vector of frame `t`. Frames are
    /// processed one at a time in evaluation mode.
    pub fn extract_video_features(&self, frames: &Tensor<S>) -> Result<FeatureSequence<S>> {
        let s = frames.shape();
        if s.len() != 4 {
            return Err(dim_err(format!("frames must be T×C×H×W, got {s:?}")));
        }
        let rows = (0..s[0])
            .map(|t| self.frame_features(&frames.slice_outer(t, 1)?.reshape(&s[1..])?))
            .collect::<Result<Vec<_>>>()?;
        FeatureSequence::new(Tensor::stack(&rows)?)
    }

    /// Number of convolution weights, excluding normalization and SE.
    pub fn conv_weight_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |name, t, _| {
            if t.ndim() == 4 && !name.contains(".se.") {
                total += t.numel()
            }
        });
        total
    }
}

impl<S: Scalar> Parameters<S> for SeResNet<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>, ParamKind)) {
        f("stem.conv", &self.stem_conv, ParamKind::Trainable);
        visit_child("stem.bn", &self.stem_bn, f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                visit_child(&format!("stage{}.block{j}", i + 1), block, f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        f("stem.conv", &mut self.stem_conv, ParamKind::Trainable);
        visit_child_mut("stem.bn", &mut self.stem_bn, f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                visit_child_mut(&format!("stage{}.block{j}", i + 1), block, f);
            }
        }
    }
}
