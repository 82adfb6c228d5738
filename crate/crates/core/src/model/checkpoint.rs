//! Binary tensor container and model checkpoints.
//!
//! Layout: `b"MOPO"`, `u32` version, `u64` header length, a JSON header, then
//! every tensor as contiguous little-endian `f64` in header order. All
//! integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Optimizer, OptimizerKind, Tensor};

const MAGIC: &[u8; 4] = b"MOPO";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Writes named tensors plus free-form metadata.
pub fn write_container(
    path: &Path,
    meta: serde_json::Value,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&Header {
        meta,
        tensors: entries,
    })
    .map_err(|e| Error::CorruptPayload(e.to_string()))?;

    let mut buf = Vec::with_capacity(16 + header.len() + 8 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in tensors.values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a file written by [`write_container`].
pub fn read_container(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, Tensor>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::CorruptPayload("bad magic or truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::CorruptPayload("header extends past end of file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::CorruptPayload(format!("header: {e}")))?;
    let payload = &bytes[payload_start..];
    if payload.len() % 8 != 0 {
        return Err(Error::CorruptPayload("payload is not a whole number of f64".into()));
    }
    let values = payload.len() / 8;

    let mut tensors = BTreeMap::new();
    let mut expected_offset = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset + n > values {
            return Err(Error::CorruptPayload(format!(
                "tensor `{}` at offset {} with {} values does not fit payload of {}",
                e.name, e.offset, n, values
            )));
        }
        let data = payload[8 * e.offset..8 * (e.offset + n)]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(e.name, Tensor::new(e.shape, data)?);
        expected_offset += n;
    }
    if expected_offset != values {
        return Err(Error::CorruptPayload(format!(
            "shape table covers {expected_offset} values, payload has {values}"
        )));
    }
    Ok((header.meta, tensors))
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub optimizer: Option<Optimizer>,
    pub rng: Option<RngState>,
    pub step: u64,
    pub epoch: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    optimizer: Option<OptimizerMeta>,
    rng: Option<RngState>,
    step: u64,
    epoch: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
}

const FIRST: &str = "opt.m.";
const SECOND: &str = "opt.v.";
const PARAM: &str = "param.";

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (k, v) in ckpt.params.as_map() {
        tensors.insert(format!("{PARAM}{k}"), v.clone());
    }
    if let Some(opt) = &ckpt.optimizer {
        for (k, v) in &opt.first_moment {
            tensors.insert(format!("{FIRST}{k}"), v.clone());
        }
        for (k, v) in &opt.second_moment {
            tensors.insert(format!("{SECOND}{k}"), v.clone());
        }
    }
    let meta = CheckpointMeta {
        config: ckpt.config.clone(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerMeta {
            kind: o.kind,
            learning_rate: o.learning_rate,
            step: o.step,
        }),
        rng: ckpt.rng.clone(),
        step: ckpt.step,
        epoch: ckpt.epoch,
    };
    let meta = serde_json::to_value(meta).map_err(|e| Error::CorruptPayload(e.to_string()))?;
    write_container(path, meta, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (meta, tensors) = read_container(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| Error::CorruptPayload(format!("checkpoint metadata: {e}")))?;
    let mut params = BTreeMap::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for (k, v) in tensors {
        if let Some(name) = k.strip_prefix(PARAM) {
            params.insert(name.to_string(), v);
        } else if let Some(name) = k.strip_prefix(FIRST) {
            first.insert(name.to_string(), v);
        } else if let Some(name) = k.strip_prefix(SECOND) {
            second.insert(name.to_string(), v);
        } else {
            return Err(Error::CorruptPayload(format!("unexpected tensor `{k}`")));
        }
    }
    let optimizer = meta.optimizer.map(|o| Optimizer {
        kind: o.kind,
        learning_rate: o.learning_rate,
        step: o.step,
        first_moment: first,
        second_moment: second,
    });
    Ok(Checkpoint {
        config: meta.config,
        params: ParameterStore::from_map(params),
        optimizer,
        rng: meta.rng,
        step: meta.step,
        epoch: meta.epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sample() -> Checkpoint {
        let config = ModelConfig::bernoulli(&[5, 3], 2, &[4]);
        let params = ParameterStore::init(&config, 9).unwrap();
        let mut opt = Optimizer::adam(1e-3);
        let mut p = params.clone().into_map();
        let grads = p.clone();
        opt.step(&mut p, &grads).unwrap();
        Checkpoint {
            config,
            params: ParameterStore::from_map(p),
            optimizer: Some(opt),
            rng: Some(RngState::capture(&seeded(4))),
            step: 1,
            epoch: 0,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let ckpt = sample();
        save_checkpoint(&a, &ckpt).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&b, &loaded).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn damaged_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptPayload(_))));

        let mut wrong = bytes.clone();
        wrong[4] = 9;
        fs::write(&path, &wrong).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io(_))
        ));
    }
}
