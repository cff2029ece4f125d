//! Video data protocol: segmentation, resizing, augmentation and
//! normalization, plus dataset manifests and a synthetic benchmark.

pub mod manifest;
pub mod synth;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::layers::Mode;
use crate::tensor::Tensor;

/// A decoded video with frames `T×3×H×W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub frames: Tensor<f32>,
    pub label: usize,
    pub id: String,
}

impl VideoSample {
    pub fn new(frames: Tensor<f32>, label: usize, id: impl Into<String>) -> Result<Self> {
        if frames.ndim() != 4 || frames.shape()[1] != 3 {
            return Err(dim_err(format!("video frames must be T×3×H×W, got {:?}", frames.shape())));
        }
        Ok(Self { frames, label, id: id.into() })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame(&self, t: usize) -> Result<Tensor<f32>> {
        let s = self.frames.shape();
        self.frames.slice_outer(t, 1)?.reshape(&s[1..])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpec {
    pub length: usize,
    pub stride: usize,
}

impl SegmentSpec {
    pub fn full() -> Self {
        Self { length: 30, stride: 15 }
    }

    pub fn tiny() -> Self {
        Self { length: 10, stride: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.length == 0 || self.stride > self.length {
            return Err(Error::Input(format!(
                "segment stride {} must be in 1..={}",
                self.stride, self.length
            )));
        }
        Ok(())
    }
}

/// Frame indices of one fixed-length window of a video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub frames: Vec<usize>,
    pub label: usize,
}

/// Start frames of every segment of a `frame_count`-frame video: multiples
/// of the stride up to the last start whose window reaches the end, so
/// `max(1, ceil((T - L) / stride) + 1)` segments.
pub fn segment_starts(frame_count: usize, spec: &SegmentSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    if frame_count == 0 {
        return Err(Error::Input("cannot segment an empty video".into()));
    }
    let extra = frame_count.saturating_sub(spec.length);
    let count = extra.div_ceil(spec.stride) + 1;
    Ok((0..count).map(|i| i * spec.stride).collect())
}

/// Segments of a video. Windows that run past the last frame wrap around
/// to frame 0 of the video.
pub fn segment_video(frame_count: usize, label: usize, spec: &SegmentSpec) -> Result<Vec<Segment>> {
    Ok(segment_starts(frame_count, spec)?
        .into_iter()
        .map(|start| Segment {
            start,
            frames: (start..start + spec.length).map(|i| i % frame_count).collect(),
            label,
        })
        .collect())
}

/// Stacks the frames of `segment` into `L×3×H×W`.
pub fn gather_segment(video: &VideoSample, segment: &Segment) -> Result<Tensor<f32>> {
    let frames = segment.frames.iter().map(|&t| video.frame(t)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&frames)
}

fn frame_dims(frame: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match frame.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(dim_err(format!("frame must be C×H×W, got {s:?}"))),
    }
}

/// Output size when the shorter side becomes `target`.
pub fn short_side_size(h: usize, w: usize, target: usize) -> (usize, usize) {
    let scaled = |long: usize, short: usize| ((long as f64 * target as f64 / short as f64).round() as usize).max(1);
    if h <= w {
        (target, scaled(w, h))
    } else {
        (scaled(h, w), target)
    }
}

/// Bilinear resampling of a `C×H×W` frame to `C×out_h×out_w`, with pixel
/// centres aligned.
pub fn resize_bilinear(frame: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = frame_dims(frame)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Input("resize target must be positive".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(frame.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (taps(out_h, h), taps(out_w, w));
    let src = frame.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Scales a frame so its shorter side is `target`, rounding the longer side.
pub fn resize_short_side(frame: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = frame_dims(frame)?;
    let (oh, ow) = short_side_size(h, w, target);
    resize_bilinear(frame, oh, ow)
}

pub fn crop(frame: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = frame_dims(frame)?;
    if top + size > h || left + size > w {
        return Err(Error::Input(format!("{size}×{size} crop at ({top}, {left}) exceeds {h}×{w} frame")));
    }
    let src = frame.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&src[row + left..row + left + size]);
        }
    }
    Tensor::new(&[c, size, size], out)
}

/// Mirrors a frame left to right.
pub fn flip_horizontal(frame: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, w) = frame_dims(frame)?;
    let mut out = frame.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub short_side: usize,
    pub crop: usize,
    pub flip_prob: f64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl AugmentConfig {
    pub fn full() -> Self {
        Self { short_side: 256, crop: 224, ..Self::tiny() }
    }

    pub fn tiny() -> Self {
        Self {
            short_side: 18,
            crop: 16,
            flip_prob: 0.5,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// `(x - mean_c) / std_c` per channel of a `…×3×H×W` tensor.
pub fn normalize(x: &Tensor<f32>, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    per_channel(x, |v, c| (v - cfg.mean[c]) / cfg.std[c])
}

pub fn denormalize(x: &Tensor<f32>, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    per_channel(x, |v, c| v * cfg.std[c] + cfg.mean[c])
}

fn per_channel(x: &Tensor<f32>, f: impl Fn(f32, usize) -> f32) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() < 3 || s[s.len() - 3] != 3 {
        return Err(dim_err(format!("expected …×3×H×W, got {s:?}")));
    }
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f(*v, (i / plane) % 3);
    }
    Ok(out)
}

/// Resizes, crops, optionally flips and normalizes an `L×3×H×W` segment.
/// Training draws one crop offset and one flip decision for the whole
/// segment; evaluation takes the centre crop.
pub fn augment_segment<R: Rng + ?Sized>(
    segment: &Tensor<f32>,
    cfg: &AugmentConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let s = segment.shape();
    if s.len() != 4 {
        return Err(dim_err(format!("segment must be L×3×H×W, got {s:?}")));
    }
    if cfg.crop > cfg.short_side {
        return Err(Error::Input(format!("crop {} exceeds short side {}", cfg.crop, cfg.short_side)));
    }
    let (h, w) = short_side_size(s[2], s[3], cfg.short_side);
    let (top, left, flip) = match mode {
        Mode::Train => (
            rng.random_range(0..=h - cfg.crop),
            rng.random_range(0..=w - cfg.crop),
            rng.random::<f64>() < cfg.flip_prob,
        ),
        Mode::Eval => ((h - cfg.crop) / 2, (w - cfg.crop) / 2, false),
    };
    let mut frames = Vec::with_capacity(s[0]);
    for t in 0..s[0] {
        let frame = segment.slice_outer(t, 1)?.reshape(&s[1..])?;
        let mut f = crop(&resize_bilinear(&frame, h, w)?, top, left, cfg.crop)?;
        if flip {
            f = flip_horizontal(&f)?;
        }
        frames.push(f);
    }
    normalize(&Tensor::stack(&frames)?, cfg)
}
