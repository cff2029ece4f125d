//! Seeded synthetic action videos.
//!
//! Every video is mostly noise frames (`0.5 + N(0, σ²)` per pixel). One
//! contiguous run of informative frames shows a bright square moving
//! vertically, with a dimmer copy at its previous position. The class
//! fixes both where the run sits in time and which way the square moves:
//! class `k` moves down for even `k` and up for odd `k`, and occupies
//! temporal slot `k / 2`. Motion is vertical so horizontal flips keep the
//! class.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::VideoSample;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples: usize,
    pub frames: usize,
    pub noise: f64,
    pub seed: u64,
    /// Frame side length.
    pub size: usize,
}

impl SynthConfig {
    pub fn new(classes: usize, samples: usize, frames: usize, noise: f64, seed: u64) -> Self {
        Self { classes, samples, frames, noise, seed, size: 18 }
    }

    /// Length of the informative run.
    pub fn run_len(&self) -> usize {
        (2 * self.frames / 5).max(2).min(self.frames)
    }

    pub fn slots(&self) -> usize {
        self.classes.div_ceil(2)
    }

    /// First frame of the informative run for a class.
    pub fn run_start(&self, class: usize) -> usize {
        let slots = self.slots();
        let room = self.frames - self.run_len();
        if slots <= 1 {
            room / 2
        } else {
            (class / 2) * room / (slots - 1)
        }
    }

    fn square(&self) -> usize {
        (self.size / 4).max(1)
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub videos: Vec<VideoSample>,
    /// Per video, whether each frame belongs to the informative run.
    pub informative: Vec<Vec<bool>>,
}

pub const BACKGROUND: f32 = 0.0;
pub const NOISE_MEAN: f32 = 0.5;
pub const SQUARE: f32 = 1.0;
pub const TRAIL: f32 = 0.5;

/// Noise-free informative frame `i` of the run for `class`, with the square's
/// left edge at column `x`.
pub fn pattern_frame(cfg: &SynthConfig, class: usize, i: usize, x: usize) -> Tensor<f32> {
    let (n, sq) = (cfg.size, cfg.square());
    let run = cfg.run_len();
    let travel = n.saturating_sub(sq + 2);
    let step = if run > 1 { travel / (run - 1) } else { 0 };
    let down = class % 2 == 0;
    let row = |j: usize| if down { 1 + j * step } else { 1 + (run - 1 - j) * step };
    let y = row(i);
    let prev = if down { y.saturating_sub(step) } else { (y + step).min(n - sq) };
    let mut plane = vec![BACKGROUND; n * n];
    let mut paint = |top: usize, v: f32| {
        for yy in top..(top + sq).min(n) {
            for xx in x..(x + sq).min(n) {
                plane[yy * n + xx] = v;
            }
        }
    };
    paint(prev, TRAIL);
    paint(y, SQUARE);
    let mut data = Vec::with_capacity(3 * n * n);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new(&[3, n, n], data).expect("pattern shape")
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.classes < 2 {
        return Err(Error::Input("synthetic data needs at least 2 classes".into()));
    }
    if cfg.frames == 0 || cfg.samples == 0 || cfg.size < 4 || !(cfg.noise >= 0.0) {
        return Err(Error::Input(format!("invalid synthetic configuration {cfg:?}")));
    }
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Input(e.to_string()))?;
    let (n, sq) = (cfg.size, cfg.square());
    let run = cfg.run_len();
    let mut videos = Vec::with_capacity(cfg.samples);
    let mut informative = Vec::with_capacity(cfg.samples);
    for v in 0..cfg.samples {
        let label = v % cfg.classes;
        let mut r = rng::derived(cfg.seed, &[v as u64]);
        let x = r.random_range(2..=n - sq - 2);
        let start = cfg.run_start(label);
        let mask: Vec<bool> = (0..cfg.frames).map(|t| (start..start + run).contains(&t)).collect();
        let mut frames = Vec::with_capacity(cfg.frames);
        for (t, &info) in mask.iter().enumerate() {
            let base = if info {
                pattern_frame(cfg, label, t - start, x)
            } else {
                Tensor::full(&[3, n, n], NOISE_MEAN)
            };
            let mut frame = base;
            for p in frame.data_mut() {
                *p = (*p + normal.sample(&mut r) as f32).clamp(0.0, 1.0);
            }
            frames.push(frame);
        }
        videos.push(VideoSample::new(Tensor::stack(&frames)?, label, format!("video_{v:05}"))?);
        informative.push(mask);
    }
    Ok(SynthDataset { videos, informative })
}
