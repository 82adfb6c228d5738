//! Dataset directories: split files plus a manifest of seeds and hashes.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mopoe_core::data::Dataset;
use mopoe_core::harness::io::{read_split, write_split};
use mopoe_core::harness::{generate_dataset, SyntheticSetConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SyntheticSetConfig,
    pub modalities: usize,
    pub dims: Vec<usize>,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub files: Vec<FileEntry>,
    /// Hash over the per-file hashes in name order.
    pub hash: String,
}

/// Git-style blob hash: `sha256("blob <len>\0" ++ content)`.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

fn tree_hash(files: &[FileEntry]) -> String {
    let mut h = Sha256::new();
    for f in files {
        h.update(format!("{} {}\n", f.sha256, f.name).as_bytes());
    }
    hex::encode(h.finalize())
}

/// Generates both splits into `dir` and writes the manifest.
pub fn generate(cfg: &SyntheticSetConfig, dir: &Path) -> Result<Manifest> {
    let (train, test) = generate_dataset(cfg)?;
    let mut paths = write_split(dir, "train", &train)?;
    paths.extend(write_split(dir, "test", &test)?);
    let mut files = paths
        .iter()
        .map(|p| {
            let content = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(FileEntry {
                name: p.file_name().expect("file").to_string_lossy().into_owned(),
                bytes: content.len() as u64,
                sha256: blob_hash(&content),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    files.sort_by(|a, b| a.name.cmp(&b.name));
    let manifest = Manifest {
        config: cfg.clone(),
        modalities: cfg.modalities,
        dims: train.dims(),
        classes: cfg.classes,
        train: train.len(),
        test: test.len(),
        hash: tree_hash(&files),
        files,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| {
        format!("reading {}; run `mopoe gen-data` first", path.display())
    })?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Loads both splits after checking every file against the manifest.
pub fn load(dir: &Path) -> Result<(Manifest, Dataset, Dataset)> {
    let manifest = read_manifest(dir)?;
    for f in &manifest.files {
        let content = fs::read(dir.join(&f.name)).with_context(|| format!("reading {}", f.name))?;
        if blob_hash(&content) != f.sha256 {
            bail!("{} does not match its manifest hash", f.name);
        }
    }
    let train = read_split(dir, "train", manifest.modalities, manifest.classes)?;
    let test = read_split(dir, "test", manifest.modalities, manifest.classes)?;
    Ok((manifest, train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regenerating_gives_identical_hashes() {
        let cfg = SyntheticSetConfig {
            train: 40,
            test: 10,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let nested = b.path().join("x/y");
        let ma = generate(&cfg, a.path()).unwrap();
        let mb = generate(&cfg, &nested).unwrap();
        assert_eq!(ma, mb);
        let (m, train, test) = load(a.path()).unwrap();
        assert_eq!((m.train, train.len(), test.len()), (40, 40, 10));
        fs::write(a.path().join("test_labels.mmds"), b"tampered").unwrap();
        assert!(load(a.path()).is_err());
    }

    #[test]
    fn blob_hash_matches_git_convention() {
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}
