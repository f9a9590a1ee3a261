//! Binary containers.
//!
//! Mel files: `b"MELS"`, then little-endian `u32` version, frames and
//! n_mels, then `frames × n_mels` little-endian `f32` values in row-major
//! order. A JSON sidecar with the same stem carries the [`MelConfig`].
//!
//! Tensor files: `b"TNSR"`, `u32` version, `u32` rank, `rank` `u32` dims,
//! then the `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::melpipe::{MelConfig, MelSpectrogram};

pub const MEL_MAGIC: &[u8; 4] = b"MELS";
pub const MEL_VERSION: u32 = 1;
pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_mels(values: &Array2<f32>) -> Vec<u8> {
    let (frames, bins) = values.dim();
    let mut out = Vec::with_capacity(16 + frames * bins * 4);
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&MEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(bins as u32).to_le_bytes());
    for v in values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mels(bytes: &[u8]) -> Result<Array2<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MEL_MAGIC {
        return Err(Error::Format("missing MELS magic".into()));
    }
    let version = r.u32()?;
    if version != MEL_VERSION {
        return Err(Error::Format(format!("unsupported MELS version {version}")));
    }
    let frames = r.u32()? as usize;
    let bins = r.u32()? as usize;
    let data = r.f32s(frames * bins)?;
    r.finish()?;
    Array2::from_shape_vec((frames, bins), data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_mels(path: impl AsRef<Path>, values: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mels(values)).map_err(|e| Error::io(path, e))
}

pub fn read_mels(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mels(&bytes)
}

/// Sidecar path: `foo.mels` → `foo.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the binary matrix plus its JSON config sidecar.
pub fn save_mel(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    write_mels(path, &mel.values)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&mel.config)?;
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn load_mel(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let values = read_mels(path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let config: MelConfig = serde_json::from_str(&text)?;
    MelSpectrogram::new(values, config)
}

pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} do not match {} values",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::Format("missing TNSR magic".into()));
    }
    let version = r.u32()?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor version {version}"
        )));
    }
    let rank = r.u32()? as usize;
    let dims = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let data = r.f32s(dims.iter().product())?;
    r.finish()?;
    Ok((dims, data))
}
