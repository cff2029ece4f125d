//! The complete network: per-frame SE-ResNet features feeding an SE-LSTM.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::layers::Mode;
use crate::lstm::{Fusion, PredictionResult, SeLstm, SeLstmConfig};
use crate::params::{visit_child, visit_child_mut, Binder, ParamKind, Parameters};
use crate::resnet::{SeResNet, SeResNetConfig};
use crate::scalar::Scalar;
use crate::se::{ReweightMode, SqueezeAxis};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Tiny,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Tiny => "tiny",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Input(format!("unknown preset {s:?}; expected full or tiny"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeLrcnConfig {
    pub cnn: SeResNetConfig,
    pub rnn: SeLstmConfig,
    pub fusion: Fusion,
    /// Supervise only the last frame of each segment instead of every frame.
    pub final_frame_only: bool,
}

impl SeLrcnConfig {
    pub fn preset(preset: Preset, classes: usize) -> Self {
        let (cnn, rnn) = match preset {
            Preset::Full => (SeResNetConfig::resnet34(), SeLstmConfig::full(classes)),
            Preset::Tiny => (SeResNetConfig::tiny(), SeLstmConfig::tiny(classes)),
        };
        Self { cnn, rnn, fusion: Fusion::Mean, final_frame_only: false }
    }

    pub fn with_se(mut self, spatial: bool, temporal: bool) -> Self {
        self.cnn.se_enabled = spatial;
        self.rnn.se_enabled = temporal;
        self
    }

    pub fn with_sequence_se(mut self, axis: SqueezeAxis, mode: ReweightMode) -> Self {
        self.rnn.se.squeeze_axis = axis;
        self.rnn.se.reweight_mode = mode;
        self
    }

    pub fn classes(&self) -> usize {
        self.rnn.classes
    }

    pub fn segment_len(&self) -> usize {
        self.rnn.seq_len
    }

    pub fn frame_size(&self) -> usize {
        self.cnn.input_size
    }
}

/// Outputs of one forward pass over a batch of segments.
pub struct ForwardOutput<'t, S> {
    /// `B×T×K`
    pub logits: Var<'t, S>,
    /// `B×T×C` features before sequence SE.
    pub features: Var<'t, S>,
    /// Sequence SE gates, `B×T` or `B×C`.
    pub temporal_gates: Option<Var<'t, S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeLrcn<S> {
    pub cfg: SeLrcnConfig,
    pub cnn: SeResNet<S>,
    pub rnn: SeLstm<S>,
}

impl<S: Scalar> SeLrcn<S> {
    pub fn new<R: Rng + ?Sized>(cfg: SeLrcnConfig, rng: &mut R) -> Result<Self> {
        if cfg.cnn.feature_dim() != cfg.rnn.input_dim {
            return Err(Error::Input(format!(
                "CNN emits {} features but the LSTM expects {}",
                cfg.cnn.feature_dim(),
                cfg.rnn.input_dim
            )));
        }
        let cnn = SeResNet::new(cfg.cnn, rng)?;
        let rnn = SeLstm::new(cfg.rnn, rng)?;
        Ok(Self { cfg, cnn, rnn })
    }

    /// Forward pass over segments `B×T×3×H×W`.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        segments: &Tensor<S>,
        binder: &Binder<'t, S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput<'t, S>> {
        let s = segments.shape();
        if s.len() != 5 || s[1] != self.cfg.rnn.seq_len {
            return Err(dim_err(format!(
                "segments must be B×{}×C×H×W, got {s:?}",
                self.cfg.rnn.seq_len
            )));
        }
        let (b, t) = (s[0], s[1]);
        let frames = binder.tape().constant(segments.reshape(&[b * t, s[2], s[3], s[4]])?);
        let features = self.cnn.forward(&frames, binder, mode)?.reshape(&[b, t, self.cfg.rnn.input_dim])?;
        let (hidden, temporal_gates) = self.rnn.forward(&features, binder, mode, rng)?;
        let logits = self.rnn.logits(&hidden, binder, mode, rng)?;
        Ok(ForwardOutput { logits, features, temporal_gates })
    }

    /// Mean cross-entropy over supervised frames; every frame of segment `i`
    /// carries `labels[i]`.
    pub fn loss<'t>(&self, logits: &Var<'t, S>, labels: &[usize]) -> Result<Var<'t, S>> {
        let s = logits.shape();
        if s.len() != 3 || s[0] != labels.len() {
            return Err(dim_err(format!("logits {s:?} for {} labels", labels.len())));
        }
        let (b, t, k) = (s[0], s[1], s[2]);
        if self.cfg.final_frame_only {
            logits.slice(1, t - 1, 1)?.reshape(&[b, k])?.cross_entropy(labels)
        } else {
            let per_frame: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, t)).collect();
            logits.reshape(&[b * t, k])?.cross_entropy(&per_frame)
        }
    }

    /// Evaluation-mode predictions for each segment of `B×T×3×H×W`, with
    /// the sequence SE gates when enabled.
    pub fn predict(&self, segments: &Tensor<S>) -> Result<(Vec<PredictionResult<S>>, Option<Tensor<S>>)> {
        let tape = Tape::new();
        let binder = Binder::frozen(&tape);
        let mut unused = crate::rng::seeded(0);
        let out = self.forward(segments, &binder, Mode::Eval, &mut unused)?;
        let probs = out.logits.softmax(2)?.value();
        let (b, t, k) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
        let results = (0..b)
            .map(|i| PredictionResult::from_per_frame(probs.slice_outer(i, 1)?.reshape(&[t, k])?, self.cfg.fusion))
            .collect::<Result<Vec<_>>>()?;
        Ok((results, out.temporal_gates.map(|g| g.value())))
    }
}

impl<S: Scalar> Parameters<S> for SeLrcn<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>, ParamKind)) {
        visit_child("cnn", &self.cnn, f);
        visit_child("rnn", &self.rnn, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        visit_child_mut("cnn", &mut self.cnn, f);
        visit_child_mut("rnn", &mut self.rnn, f);
    }
}
