//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SELR"  u32 version (1)
//! u32 count, then `count` tensors      model parameters and buffers
//! u32 count, then `count` tensors      optimizer state
//! u32 count, then `count` tensors      configuration scalars
//! u64 FNV-1a hash of every preceding byte
//! ```
//!
//! A tensor is `u16` name length, UTF-8 name, `u8` ndim, ndim × `u32` dims
//! and the payload. Payloads are 32-bit floats unless bit 7 of the ndim
//! byte is set, in which case they are 64-bit floats.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{AdamState, Moments};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SELR";
pub const VERSION: u32 = 1;
const WIDE: u8 = 0x80;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub model: Vec<(String, Tensor<S>)>,
    pub optimizer: Vec<(String, Tensor<S>)>,
    /// Configuration echo, always stored at 64-bit precision.
    pub config: Vec<(String, f64)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn config_value(&self, key: &str) -> Option<f64> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let wide = S::BYTES == 8;
        for section in [&self.model, &self.optimizer] {
            write_count(&mut out, section.len())?;
            for (name, t) in section {
                let data: Vec<f64> = t.data().iter().map(|v| v.to_f64_lossless()).collect();
                write_tensor(&mut out, name, t.shape(), &data, wide)?;
            }
        }
        write_count(&mut out, self.config.len())?;
        for (name, v) in &self.config {
            write_tensor(&mut out, name, &[1], &[*v], true)?;
        }
        let hash = fnv1a(&out);
        out.extend_from_slice(&hash.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format { offset: 0, message: "bad magic, expected \"SELR\"".into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut sections: Vec<Vec<(String, Tensor<S>)>> = Vec::with_capacity(2);
        for _ in 0..2 {
            let count = r.u32("tensor count")? as usize;
            let mut section = Vec::new();
            for _ in 0..count {
                let (name, shape, data) = r.tensor()?;
                let t = Tensor::new(&shape, data.into_iter().map(S::of).collect())
                    .map_err(|e| Error::Format { offset: r.pos, message: e.to_string() })?;
                section.push((name, t));
            }
            sections.push(section);
        }
        let count = r.u32("config count")? as usize;
        let mut config = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos;
            let (name, shape, data) = r.tensor()?;
            if shape != [1] {
                return Err(Error::Format { offset: at, message: format!("config entry {name} is not a scalar") });
            }
            config.push((name, data[0]));
        }
        let body_end = r.pos;
        let stored = u64::from_le_bytes(r.take(8, "checksum")?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, message: "trailing bytes after checksum".into() });
        }
        if stored != fnv1a(&bytes[..body_end]) {
            return Err(Error::Format { offset: body_end, message: "checksum mismatch, file is corrupted".into() });
        }
        let optimizer = sections.pop().expect("two sections");
        let model = sections.pop().expect("two sections");
        Ok(Self { model, optimizer, config })
    }

    /// Writes to a temporary file in the target directory, then renames it
    /// over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn write_count(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Input("too many tensors for a checkpoint".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn write_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64], wide: bool) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Input(format!("tensor name too long: {name}")))?;
    if shape.len() >= WIDE as usize {
        return Err(Error::Input(format!("tensor {name} has too many dimensions")));
    }
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8 | if wide { WIDE } else { 0 });
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Input(format!("dimension {d} of {name} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        if wide {
            v.write_le(out);
        } else {
            (v as f32).write_le(out);
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos,
            message: format!("file truncated while reading {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let at = self.pos;
        let len = u16::from_le_bytes(self.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::Format { offset: at + 2, message: "tensor name is not UTF-8".into() })?
            .to_string();
        let flags = self.take(1, "ndim")?[0];
        let (ndim, wide) = ((flags & !WIDE) as usize, flags & WIDE != 0);
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Format {
            offset: at,
            message: format!("tensor {name} has an overflowing shape {shape:?}"),
        })?;
        let width = if wide { 8 } else { 4 };
        let raw = self.take(numel.saturating_mul(width), &format!("payload of {name}"))?;
        let data = raw
            .chunks_exact(width)
            .map(|c| if wide { f64::read_le(c) } else { f32::read_le(c) as f64 })
            .collect();
        Ok((name, shape, data))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Copies named tensors into `model`, requiring the same names, order and
/// shapes.
pub fn restore_parameters<S: Scalar, M: Parameters<S> + ?Sized>(model: &mut M, named: &[(String, Tensor<S>)]) -> Result<()> {
    let mut expected = Vec::new();
    model.visit(&mut |n, t, _| expected.push((n.to_string(), t.shape().to_vec())));
    if expected.len() != named.len() {
        return Err(Error::Input(format!(
            "checkpoint holds {} tensors but the model has {}",
            named.len(),
            expected.len()
        )));
    }
    for ((name, shape), (got, t)) in expected.iter().zip(named) {
        if name != got || shape.as_slice() != t.shape() {
            return Err(Error::Input(format!(
                "checkpoint tensor {got} {:?} does not match model tensor {name} {shape:?}",
                t.shape()
            )));
        }
    }
    let mut i = 0;
    model.visit_mut(&mut |_, t, _| {
        t.data_mut().copy_from_slice(named[i].1.data());
        i += 1;
    });
    Ok(())
}

pub fn optimizer_tensors<S: Scalar>(adam: &AdamState<S>) -> Vec<(String, Tensor<S>)> {
    let mut out = vec![("adam.step".to_string(), Tensor::from_f64(&[1], &[adam.step_count() as f64]).expect("scalar"))];
    for m in adam.moments() {
        out.push((format!("adam.m.{}", m.name), m.m.clone()));
        out.push((format!("adam.v.{}", m.name), m.v.clone()));
    }
    out
}

pub fn optimizer_from_tensors<S: Scalar>(lr: f64, named: &[(String, Tensor<S>)]) -> Result<AdamState<S>> {
    let bad = |msg: String| Error::Input(format!("optimizer state: {msg}"));
    let (first, rest) = named.split_first().ok_or_else(|| bad("missing".into()))?;
    if first.0 != "adam.step" || first.1.numel() != 1 {
        return Err(bad(format!("expected adam.step, found {}", first.0)));
    }
    let step = first.1.item().to_f64_lossless() as u64;
    if rest.len() % 2 != 0 {
        return Err(bad("unpaired moment buffers".into()));
    }
    let mut moments = Vec::with_capacity(rest.len() / 2);
    for pair in rest.chunks_exact(2) {
        let (m_name, v_name) = (&pair[0].0, &pair[1].0);
        let name = m_name.strip_prefix("adam.m.").ok_or_else(|| bad(format!("unexpected entry {m_name}")))?;
        if v_name.strip_prefix("adam.v.") != Some(name) || pair[0].1.shape() != pair[1].1.shape() {
            return Err(bad(format!("{v_name} does not pair with {m_name}")));
        }
        moments.push(Moments { name: name.to_string(), m: pair[0].1.clone(), v: pair[1].1.clone() });
    }
    Ok(AdamState::restore(lr, step, moments))
}
