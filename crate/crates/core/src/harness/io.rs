//! Dataset files and the idx reader.
//!
//! A modality file is `"MMDS"`, `u32` version, `u32` count, `u32` rank, the
//! `rank` per-sample dims, then `count * prod(dims)` little-endian `f64`s.
//! A labels file has rank 0 and a `u16` payload.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMDS";
pub const MMDS_VERSION: u32 = 1;

fn io_err(path: &Path, err: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(err.kind(), format!("{}: {err}", path.display())))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptPayload("file truncated".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::CorruptPayload(format!(
                "{} trailing bytes",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn header(count: usize, dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * dims.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MMDS_VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

fn read_header(c: &mut Cursor<'_>) -> Result<(usize, Vec<usize>)> {
    if c.take(4)? != MAGIC {
        return Err(Error::CorruptPayload("bad magic, expected MMDS".into()));
    }
    let version = c.u32_le()?;
    if version != MMDS_VERSION {
        return Err(Error::VersionMismatch {
            expected: MMDS_VERSION,
            found: version,
        });
    }
    let count = c.u32_le()? as usize;
    let rank = c.u32_le()? as usize;
    let dims = (0..rank)
        .map(|_| c.u32_le().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((count, dims))
}

/// Encodes an `[N, D]` modality tensor.
pub fn encode_modality(t: &Tensor) -> Vec<u8> {
    let mut out = header(t.shape()[0], &t.shape()[1..]);
    out.reserve(8 * t.numel());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_modality(bytes: &[u8]) -> Result<Tensor> {
    let mut c = Cursor { bytes, at: 0 };
    let (count, dims) = read_header(&mut c)?;
    let per: usize = dims.iter().product();
    let raw = c.take(count * per * 8)?;
    c.finish()?;
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::matrix(count, per, data)?)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = header(labels.len(), &[]);
    for &l in labels {
        let l = u16::try_from(l)
            .map_err(|_| Error::ConfigInvalid(format!("label {l} does not fit in u16")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut c = Cursor { bytes, at: 0 };
    let (count, dims) = read_header(&mut c)?;
    if !dims.is_empty() {
        return Err(Error::CorruptPayload("labels file must have rank 0".into()));
    }
    let raw = c.take(count * 2)?;
    c.finish()?;
    Ok(raw
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect())
}

pub fn modality_path(dir: &Path, split: &str, j: usize) -> PathBuf {
    dir.join(format!("{split}_m{j}.mmds"))
}

pub fn labels_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}_labels.mmds"))
}

/// Writes one file per modality plus a labels file; returns the paths written.
pub fn write_split(dir: &Path, split: &str, ds: &Dataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    for (j, t) in ds.modalities.iter().enumerate() {
        let path = modality_path(dir, split, j);
        fs::write(&path, encode_modality(t)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    let path = labels_path(dir, split);
    fs::write(&path, encode_labels(&ds.labels)?).map_err(|e| io_err(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Reads modalities `0..m` of a split.
pub fn read_split(dir: &Path, split: &str, m: usize, classes: usize) -> Result<Dataset> {
    let read = |p: PathBuf| fs::read(&p).map_err(|e| io_err(&p, e));
    let modalities = (0..m)
        .map(|j| decode_modality(&read(modality_path(dir, split, j))?))
        .collect::<Result<Vec<_>>>()?;
    let labels = decode_labels(&read(labels_path(dir, split))?)?;
    Dataset::new(modalities, labels, classes)
}

/// Unsigned-byte idx array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Rows of `dims[1..]` scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let n = self.dims.first().copied().unwrap_or(0);
        let per = self.dims.iter().skip(1).product::<usize>();
        Ok(Tensor::matrix(
            n,
            per,
            self.data.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )?)
    }
}

/// Parses idx label (`0x00000801`) and image (`0x00000803`) files.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let mut c = Cursor { bytes, at: 0 };
    let magic = c.u32_be()?;
    let rank = match magic {
        0x0000_0801 => 1,
        0x0000_0803 => 3,
        other => {
            return Err(Error::CorruptPayload(format!(
                "unsupported idx magic {other:#010x}"
            )))
        }
    };
    let dims = (0..rank)
        .map(|_| c.u32_be().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let data = c.take(dims.iter().product())?.to_vec();
    c.finish()?;
    Ok(IdxArray { dims, data })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&fs::read(path).map_err(|e| io_err(path, e))?)
}
