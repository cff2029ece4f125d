//! Dataset manifests and PPM frame directories.
//!
//! A manifest is a CSV file of `video_dir,label_index,frame_count` rows. A
//! first line whose second field is not a number is taken as a header.
//! Relative directories resolve against the manifest's own directory. Each
//! directory holds `frame_000001.ppm`, `frame_000002.ppm`, … as binary PPM.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use super::VideoSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoEntry {
    pub dir: PathBuf,
    pub label: usize,
    pub frame_count: usize,
    /// 1-based manifest line, for error reporting.
    pub line: usize,
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{:06}.ppm", index + 1))
}

pub fn load_manifest(path: &Path) -> Result<Vec<VideoEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, message: String| Error::Manifest { path: path.to_path_buf(), line, message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| err(line, e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 3 {
            return Err(err(line, format!("expected 3 fields, found {}", record.len())));
        }
        if i == 0 && record[1].parse::<f64>().is_err() {
            continue;
        }
        let label = record[1]
            .parse::<usize>()
            .map_err(|_| err(line, format!("label {:?} is not a class index", &record[1])))?;
        let frame_count = record[2]
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| err(line, format!("frame count {:?} is not a positive integer", &record[2])))?;
        let dir = base.join(&record[0]);
        if !dir.is_dir() {
            return Err(err(line, format!("video directory {} does not exist", dir.display())));
        }
        let present = (0..frame_count).all(|t| frame_path(&dir, t).is_file());
        if !present || frame_path(&dir, frame_count).exists() {
            let found = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .filter(|e| e.file_name().to_string_lossy().ends_with(".ppm"))
                .count();
            return Err(err(
                line,
                format!("{} declares {frame_count} frames but {found} were found", dir.display()),
            ));
        }
        entries.push(VideoEntry { dir, label, frame_count, line });
    }
    Ok(entries)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes a `3×H×W` frame in `[0, 1]` as 8-bit binary PPM.
pub fn write_ppm(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (h, w) = match frame.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::Dimension(format!("PPM frame must be 3×H×W, got {s:?}"))),
    };
    let d = frame.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save_with_format(path, ImageFormat::Pnm)?;
    Ok(())
}

pub fn load_video(entry: &VideoEntry) -> Result<VideoSample> {
    let frames = (0..entry.frame_count)
        .map(|t| read_ppm(&frame_path(&entry.dir, t)))
        .collect::<Result<Vec<_>>>()?;
    let first = frames[0].shape().to_vec();
    if let Some(t) = frames.iter().position(|f| f.shape() != first.as_slice()) {
        return Err(Error::Input(format!(
            "{}: frame {} has shape {:?}, frame 1 has {first:?}",
            entry.dir.display(),
            t + 1,
            frames[t].shape()
        )));
    }
    VideoSample::new(Tensor::stack(&frames)?, entry.label, entry.dir.display().to_string())
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<VideoSample>> {
    load_manifest(manifest)?.iter().map(load_video).collect()
}

/// Writes each video to `root/<id>/` and a manifest `root/manifest.csv`
/// with a header row. Returns the manifest path.
pub fn write_dataset(root: &Path, videos: &[VideoSample]) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let manifest = root.join("manifest.csv");
    let mut out = fs::File::create(&manifest)?;
    writeln!(out, "video_dir,label_index,frame_count")?;
    for v in videos {
        let dir = root.join(&v.id);
        fs::create_dir_all(&dir)?;
        for t in 0..v.frame_count() {
            write_ppm(&frame_path(&dir, t), &v.frame(t)?)?;
        }
        writeln!(out, "{},{},{}", v.id, v.label, v.frame_count())?;
    }
    Ok(manifest)
}
