//! Training, evaluation and ablation runs.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::checkpoint::{optimizer_from_tensors, optimizer_tensors, restore_parameters, Checkpoint};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::lstm::{argmax, late_fuse, Fusion};
use crate::model::{Preset, SeLrcn, SeLrcnConfig};
use crate::optim::AdamState;
use crate::params::{Binder, Parameters};
use crate::pipeline::{augment_segment, gather_segment, segment_video, AugmentConfig, Segment, SegmentSpec, VideoSample};
use crate::rng;
use crate::scalar::Scalar;
use crate::se::{FeatureSequence, ReweightMode, SqueezeAxis};
use crate::tensor::Tensor;

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_DROPOUT: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    pub se_spatial: bool,
    pub se_temporal: bool,
    pub squeeze_axis: SqueezeAxis,
    pub reweight_mode: ReweightMode,
    /// Reduction ratio of the sequence excitation.
    pub sequence_reduction: usize,
    pub lstm_layers: usize,
    pub hidden_units: usize,
    pub final_frame_only: bool,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            epochs: 16,
            learning_rate: 1e-5,
            batch_size: 28,
            lr_decay: 0.9,
            dropout: 0.5,
            seed: 0,
            se_spatial: true,
            se_temporal: true,
            squeeze_axis: SqueezeAxis::Channel,
            reweight_mode: ReweightMode::Residual,
            sequence_reduction: 16,
            lstm_layers: 3,
            hidden_units: 1024,
            final_frame_only: false,
        }
    }

    pub fn tiny() -> Self {
        Self { preset: Preset::Tiny, lstm_layers: 2, hidden_units: 32, sequence_reduction: 2, ..Self::full() }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::full(),
            Preset::Tiny => Self::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.sequence_reduction > 0
            && self.epochs > 0 && self.batch_size > 0 && self.lstm_layers > 0 && self.hidden_units > 0;
        if !positive || !(self.learning_rate > 0.0) {
            return Err(Error::Input(format!("training settings must be positive: {self:?}")));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Input(format!("lr decay {} must be in (0, 1]", self.lr_decay)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Input(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        if self.squeeze_axis == SqueezeAxis::Spatial {
            return Err(Error::Input("the sequence squeeze axis cannot be spatial".into()));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }

    pub fn segment_spec(&self) -> SegmentSpec {
        match self.preset {
            Preset::Full => SegmentSpec::full(),
            Preset::Tiny => SegmentSpec::tiny(),
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        match self.preset {
            Preset::Full => AugmentConfig::full(),
            Preset::Tiny => AugmentConfig::tiny(),
        }
    }

    pub fn model_config(&self, classes: usize) -> SeLrcnConfig {
        let mut cfg = SeLrcnConfig::preset(self.preset, classes)
            .with_se(self.se_spatial, self.se_temporal)
            .with_sequence_se(self.squeeze_axis, self.reweight_mode);
        cfg.rnn.se.reduction_ratio = self.sequence_reduction;
        cfg.rnn.layers = self.lstm_layers;
        cfg.rnn.hidden = self.hidden_units;
        cfg.rnn.dropout = self.dropout;
        cfg.rnn.seq_len = self.segment_spec().length;
        cfg.final_frame_only = self.final_frame_only;
        cfg
    }

    /// Flat numeric echo for checkpoints.
    pub fn to_entries(&self, classes: usize, epoch: usize) -> Vec<(String, f64)> {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        [
            ("preset", if self.preset == Preset::Full { 0.0 } else { 1.0 }),
            ("epochs", self.epochs as f64),
            ("learning_rate", self.learning_rate),
            ("batch_size", self.batch_size as f64),
            ("lr_decay", self.lr_decay),
            ("dropout", self.dropout),
            ("seed_lo", (self.seed & 0xffff_ffff) as f64),
            ("seed_hi", (self.seed >> 32) as f64),
            ("se_spatial", flag(self.se_spatial)),
            ("se_temporal", flag(self.se_temporal)),
            ("squeeze_axis", if self.squeeze_axis == SqueezeAxis::Channel { 0.0 } else { 1.0 }),
            ("reweight_mode", if self.reweight_mode == ReweightMode::Residual { 0.0 } else { 1.0 }),
            ("sequence_reduction", self.sequence_reduction as f64),
            ("lstm_layers", self.lstm_layers as f64),
            ("hidden_units", self.hidden_units as f64),
            ("final_frame_only", flag(self.final_frame_only)),
            ("classes", classes as f64),
            ("epoch", epoch as f64),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Inverse of [`TrainConfig::to_entries`]: the config, class count and
    /// completed epochs.
    pub fn from_entries(entries: &[(String, f64)]) -> Result<(Self, usize, usize)> {
        let get = |key: &str| {
            entries
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Input(format!("checkpoint config lacks {key}")))
        };
        let count = |key: &str| -> Result<usize> { Ok(get(key)? as usize) };
        let cfg = Self {
            preset: if get("preset")? == 0.0 { Preset::Full } else { Preset::Tiny },
            epochs: count("epochs")?,
            learning_rate: get("learning_rate")?,
            batch_size: count("batch_size")?,
            lr_decay: get("lr_decay")?,
            dropout: get("dropout")?,
            seed: (get("seed_lo")? as u64) | ((get("seed_hi")? as u64) << 32),
            se_spatial: get("se_spatial")? != 0.0,
            se_temporal: get("se_temporal")? != 0.0,
            squeeze_axis: if get("squeeze_axis")? == 0.0 { SqueezeAxis::Channel } else { SqueezeAxis::Time },
            reweight_mode: if get("reweight_mode")? == 0.0 { ReweightMode::Residual } else { ReweightMode::ScaleOnly },
            sequence_reduction: count("sequence_reduction")?,
            lstm_layers: count("lstm_layers")?,
            hidden_units: count("hidden_units")?,
            final_frame_only: get("final_frame_only")? != 0.0,
        };
        Ok((cfg, count("classes")?, count("epoch")?))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
    /// Per-class accuracy from the final evaluation.
    pub per_class: Vec<f64>,
    pub wall_time_secs: f64,
}

impl Metrics {
    /// `epoch,train_loss,train_acc,eval_acc` rows; a missing evaluation is
    /// left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,eval_acc\n");
        for e in &self.epochs {
            let eval = e.eval_acc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", e.epoch + 1, e.train_loss, e.train_acc, eval).expect("string write");
        }
        out
    }
}

/// Segments of every video, in dataset order.
pub fn dataset_segments(videos: &[VideoSample], spec: &SegmentSpec) -> Result<Vec<(usize, Segment)>> {
    let mut out = Vec::new();
    for (i, v) in videos.iter().enumerate() {
        for seg in segment_video(v.frame_count(), v.label, spec)? {
            out.push((i, seg));
        }
    }
    Ok(out)
}

fn segment_batch<S: Scalar>(
    videos: &[VideoSample],
    items: &[(usize, Segment)],
    augment: &AugmentConfig,
    mode: Mode,
    seed: u64,
    epoch: usize,
) -> Result<Tensor<S>> {
    let tensors = items
        .iter()
        .map(|(v, seg)| {
            let video = &videos[*v];
            let mut r = rng::derived(seed, &[TAG_AUGMENT, epoch as u64, rng::tag_str(&video.id), seg.start as u64]);
            Ok(augment_segment(&gather_segment(video, seg)?, augment, mode, &mut r)?.cast::<S>())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&tensors)
}

fn check_labels(videos: &[VideoSample], classes: usize) -> Result<()> {
    if videos.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    match videos.iter().find(|v| v.label >= classes) {
        Some(v) => Err(Error::Input(format!("video {} has label {} but there are {classes} classes", v.id, v.label))),
        None => Ok(()),
    }
}

/// Model, optimizer and progress of one training run.
#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub cfg: TrainConfig,
    pub classes: usize,
    pub model: SeLrcn<S>,
    pub adam: AdamState<S>,
    /// Completed epochs.
    pub epoch: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: TrainConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::Input("at least 2 classes are required".into()));
        }
        let mut r = rng::derived(cfg.seed, &[TAG_INIT]);
        let model = SeLrcn::new(cfg.model_config(classes), &mut r)?;
        let adam = AdamState::new(cfg.learning_rate);
        Ok(Self { cfg, classes, model, adam, epoch: 0 })
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            model: self.model.named_tensors(),
            optimizer: optimizer_tensors(&self.adam),
            config: self.cfg.to_entries(self.classes, self.epoch),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        let (cfg, classes, epoch) = TrainConfig::from_entries(&ckpt.config)?;
        let mut trainer = Self::new(cfg, classes)?;
        restore_parameters(&mut trainer.model, &ckpt.model)?;
        trainer.adam = optimizer_from_tensors(trainer.cfg.lr_at(epoch), &ckpt.optimizer)?;
        trainer.epoch = epoch;
        Ok(trainer)
    }

    /// Trains one epoch, then evaluates on `eval` when given.
    pub fn run_epoch(&mut self, train: &[VideoSample], eval: Option<&[VideoSample]>) -> Result<EpochMetrics> {
        check_labels(train, self.classes)?;
        let epoch = self.epoch;
        let (seed, spec, augment) = (self.cfg.seed, self.cfg.segment_spec(), self.cfg.augment());
        let lr = self.cfg.lr_at(epoch);
        self.adam.lr = lr;
        let mut items = dataset_segments(train, &spec)?;
        items.shuffle(&mut rng::derived(seed, &[TAG_SHUFFLE, epoch as u64]));

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in items.chunks(self.cfg.batch_size).enumerate() {
            let x = segment_batch::<S>(train, batch, &augment, Mode::Train, seed, epoch)?;
            let labels: Vec<usize> = batch.iter().map(|(_, s)| s.label).collect();
            let mut drop_rng = rng::derived(seed, &[TAG_DROPOUT, epoch as u64, b as u64]);
            let tape = Tape::new();
            let binder = Binder::new(&tape);
            let out = self.model.forward(&x, &binder, Mode::Train, &mut drop_rng)?;
            let loss = self.model.loss(&out.logits, &labels)?;
            let loss_value = loss.value().item().to_f64_lossless();
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!("loss is {loss_value} at epoch {}, batch {}", epoch + 1, b + 1)));
            }
            let probs = out.logits.softmax(2)?.value();
            let (t, k) = (probs.shape()[1], probs.shape()[2]);
            for (i, &label) in labels.iter().enumerate() {
                let fused = late_fuse(&probs.slice_outer(i, 1)?.reshape(&[t, k])?, self.model.cfg.fusion)?;
                correct += usize::from(argmax(fused.data()) == label);
            }
            loss_sum += loss_value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            self.model.zero_grads();
            binder.commit(&mut self.model, Some(&grads))?;
            self.adam.step_model(&mut self.model)?;
        }
        self.epoch += 1;
        let eval_acc = eval.map(|e| evaluate(&self.model, &self.cfg, e).map(|r| r.accuracy)).transpose()?;
        Ok(EpochMetrics {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / items.len() as f64,
            train_acc: correct as f64 / items.len() as f64,
            eval_acc,
        })
    }
}

/// Trains for `cfg.epochs` epochs from a fresh initialization.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    classes: usize,
    train_set: &[VideoSample],
    eval_set: Option<&[VideoSample]>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Trainer<S>, Metrics)> {
    let mut trainer = Trainer::new(cfg.clone(), classes)?;
    let metrics = continue_training(&mut trainer, cfg.epochs, train_set, eval_set, &mut on_epoch)?;
    Ok((trainer, metrics))
}

/// Runs epochs until `trainer` has completed `until` of them.
pub fn continue_training<S: Scalar>(
    trainer: &mut Trainer<S>,
    until: usize,
    train_set: &[VideoSample],
    eval_set: Option<&[VideoSample]>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Metrics> {
    let started = Instant::now();
    let mut metrics = Metrics::default();
    while trainer.epoch < until {
        let m = trainer.run_epoch(train_set, eval_set)?;
        on_epoch(&m);
        metrics.epochs.push(m);
    }
    if let Some(eval) = eval_set {
        metrics.per_class = evaluate(&trainer.model, &trainer.cfg, eval)?.per_class;
    }
    metrics.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport<S> {
    pub accuracy: f64,
    /// Accuracy within each class; `NaN` for classes without videos.
    pub per_class: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub predictions: Vec<usize>,
    /// Per video, the mean of its segments' fused distributions.
    pub video_scores: Vec<Tensor<S>>,
    /// Per video, the segments and (when sequence SE is enabled) their gates.
    pub segments: Vec<Vec<Segment>>,
    pub gates: Vec<Vec<Tensor<S>>>,
}

/// Video-level accuracy from fused distributions: `K`-vectors, one list per
/// video. Segment distributions are averaged per video.
pub fn score_videos<S: Scalar>(
    fused: &[Vec<Tensor<S>>],
    labels: &[usize],
    classes: usize,
) -> Result<(f64, Vec<f64>, Vec<usize>, Vec<usize>, Vec<Tensor<S>>)> {
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    let mut predictions = Vec::with_capacity(labels.len());
    let mut scores = Vec::with_capacity(labels.len());
    for (segs, &label) in fused.iter().zip(labels) {
        let stacked = Tensor::stack(segs)?;
        let video = late_fuse(&stacked, Fusion::Mean)?;
        let pred = argmax(video.data());
        counts[label] += 1;
        hits[label] += usize::from(pred == label);
        predictions.push(pred);
        scores.push(video);
    }
    let total: usize = counts.iter().sum();
    let accuracy = hits.iter().sum::<usize>() as f64 / total.max(1) as f64;
    let per_class = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { f64::NAN } else { h as f64 / c as f64 })
        .collect();
    Ok((accuracy, per_class, counts, predictions, scores))
}

pub fn evaluate<S: Scalar>(model: &SeLrcn<S>, cfg: &TrainConfig, videos: &[VideoSample]) -> Result<EvalReport<S>> {
    let classes = model.cfg.classes();
    check_labels(videos, classes)?;
    let (spec, augment) = (cfg.segment_spec(), cfg.augment());
    let items = dataset_segments(videos, &spec)?;
    let mut fused: Vec<Vec<Tensor<S>>> = vec![Vec::new(); videos.len()];
    let mut gates: Vec<Vec<Tensor<S>>> = vec![Vec::new(); videos.len()];
    let mut segments: Vec<Vec<Segment>> = vec![Vec::new(); videos.len()];
    for batch in items.chunks(cfg.batch_size.max(1)) {
        let x = segment_batch::<S>(videos, batch, &augment, Mode::Eval, cfg.seed, 0)?;
        let (results, batch_gates) = model.predict(&x)?;
        for (i, ((v, seg), result)) in batch.iter().zip(results).enumerate() {
            fused[*v].push(result.fused);
            if let Some(g) = &batch_gates {
                let len = g.shape()[1];
                gates[*v].push(g.slice_outer(i, 1)?.reshape(&[len])?);
            }
            segments[*v].push(seg.clone());
        }
    }
    let labels: Vec<usize> = videos.iter().map(|v| v.label).collect();
    let (accuracy, per_class, class_counts, predictions, video_scores) = score_videos(&fused, &labels, classes)?;
    Ok(EvalReport { accuracy, per_class, class_counts, predictions, video_scores, segments, gates })
}

/// Per-frame features `T×C` of a whole video: each frame is resized,
/// centre-cropped and normalized, then passed through the CNN.
pub fn video_features<S: Scalar>(model: &SeLrcn<S>, cfg: &TrainConfig, video: &VideoSample) -> Result<FeatureSequence<S>> {
    let augment = cfg.augment();
    let mut unused = rng::seeded(0);
    let frames = augment_segment(&video.frames, &augment, Mode::Eval, &mut unused)?;
    model.cnn.extract_video_features(&frames.cast::<S>())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// The 2×2 grid of spatial and temporal SE switches.
    Se,
    Layers(Vec<usize>),
    Hidden(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub se_spatial: bool,
    pub se_temporal: bool,
    pub layers: usize,
    pub hidden: usize,
    pub eval_acc: f64,
}

/// Every configuration of the cross product of `axes`, in row-major order
/// with the last axis varying fastest. The SE axis yields
/// `(off, off), (on, off), (off, on), (on, on)` as (spatial, temporal).
pub fn ablation_configs(base: &TrainConfig, axes: &[AblationAxis]) -> Vec<TrainConfig> {
    let mut configs = vec![base.clone()];
    for axis in axes {
        configs = configs
            .into_iter()
            .flat_map(|c| -> Vec<TrainConfig> {
                match axis {
                    AblationAxis::Se => [(false, false), (true, false), (false, true), (true, true)]
                        .into_iter()
                        .map(|(s, t)| TrainConfig { se_spatial: s, se_temporal: t, ..c.clone() })
                        .collect(),
                    AblationAxis::Layers(values) => {
                        values.iter().map(|&l| TrainConfig { lstm_layers: l, ..c.clone() }).collect()
                    }
                    AblationAxis::Hidden(values) => {
                        values.iter().map(|&h| TrainConfig { hidden_units: h, ..c.clone() }).collect()
                    }
                }
            })
            .collect();
    }
    configs
}

/// Trains and evaluates every configuration of the grid with the shared seed.
pub fn ablation_grid<S: Scalar>(
    base: &TrainConfig,
    axes: &[AblationAxis],
    classes: usize,
    train_set: &[VideoSample],
    eval_set: &[VideoSample],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for cfg in ablation_configs(base, axes) {
        let (trainer, _) = train::<S>(&cfg, classes, train_set, None, |_| {})?;
        let report = evaluate(&trainer.model, &cfg, eval_set)?;
        let row = AblationRow {
            se_spatial: cfg.se_spatial,
            se_temporal: cfg.se_temporal,
            layers: cfg.lstm_layers,
            hidden: cfg.hidden_units,
            eval_acc: report.accuracy,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("se_spatial,se_temporal,layers,hidden,eval_acc\n");
    let onoff = |b: bool| if b { "on" } else { "off" };
    for r in rows {
        writeln!(out, "{},{},{},{},{}", onoff(r.se_spatial), onoff(r.se_temporal), r.layers, r.hidden, r.eval_acc)
            .expect("string write");
    }
    out
}
