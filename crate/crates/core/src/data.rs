//! Multimodal samples, minibatches, and columnar datasets.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::fusion::SubsetMask;
use crate::tensor::Tensor;

/// One observation set `{x_j}`; `None` marks a missing modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub modalities: Vec<Option<Vec<f64>>>,
    pub label: Option<usize>,
}

impl MultimodalSample {
    pub fn present(&self) -> Vec<bool> {
        self.modalities.iter().map(Option::is_some).collect()
    }
}

/// Row-batched modalities, each `[B, D_j]`.
///
/// Reads of modality tensors go through [`MultimodalBatch::observed`], which
/// records the access so tests can assert absent modalities are never touched.
#[derive(Debug, Clone)]
pub struct MultimodalBatch {
    data: Vec<Option<Tensor>>,
    labels: Option<Vec<usize>>,
    rows: usize,
    reads: Cell<u32>,
}

impl MultimodalBatch {
    pub fn new(data: Vec<Option<Tensor>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let mut rows = None;
        for t in data.iter().flatten() {
            if t.rank() != 2 {
                return Err(Error::ConfigInvalid(format!(
                    "modality tensors must be [rows, dims], got {:?}",
                    t.shape()
                )));
            }
            match rows {
                None => rows = Some(t.shape()[0]),
                Some(r) if r != t.shape()[0] => {
                    return Err(Error::DimMismatch {
                        expected: r,
                        got: t.shape()[0],
                    })
                }
                _ => {}
            }
        }
        let rows = rows.ok_or(Error::NoModalityPresent)?;
        if let Some(l) = &labels {
            if l.len() != rows {
                return Err(Error::DimMismatch {
                    expected: rows,
                    got: l.len(),
                });
            }
        }
        Ok(Self {
            data,
            labels,
            rows,
            reads: Cell::new(0),
        })
    }

    /// Stacks samples that share one presence pattern.
    pub fn from_samples(samples: &[MultimodalSample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::TooFewSamples { needed: 1, got: 0 })?;
        let present = first.present();
        let mut data = Vec::with_capacity(present.len());
        for (j, &p) in present.iter().enumerate() {
            if !p {
                data.push(None);
                continue;
            }
            let dims = first.modalities[j].as_ref().map_or(0, Vec::len);
            let mut flat = Vec::with_capacity(samples.len() * dims);
            for s in samples {
                let x = s.modalities.get(j).and_then(Option::as_ref).ok_or_else(|| {
                    Error::ConfigInvalid("samples in a batch must share presence".into())
                })?;
                if x.len() != dims {
                    return Err(Error::DimMismatch {
                        expected: dims,
                        got: x.len(),
                    });
                }
                flat.extend_from_slice(x);
            }
            data.push(Some(Tensor::matrix(samples.len(), dims, flat)?));
        }
        let labels = samples.iter().map(|s| s.label).collect::<Option<Vec<_>>>();
        Self::new(data, labels)
    }

    pub fn num_modalities(&self) -> usize {
        self.data.len()
    }

    pub fn batch_size(&self) -> usize {
        self.rows
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_present(&self, j: usize) -> bool {
        self.data.get(j).is_some_and(Option::is_some)
    }

    pub fn present(&self) -> Vec<bool> {
        self.data.iter().map(Option::is_some).collect()
    }

    pub fn present_mask(&self) -> Result<SubsetMask> {
        SubsetMask::from_present(&self.present())
    }

    /// Modality `j` if present. Every call is recorded.
    pub fn observed(&self, j: usize) -> Option<&Tensor> {
        if j < 32 {
            self.reads.set(self.reads.get() | 1 << j);
        }
        self.data.get(j).and_then(Option::as_ref)
    }

    /// Bitmask of modalities read through [`MultimodalBatch::observed`].
    pub fn reads(&self) -> u32 {
        self.reads.get()
    }

    pub fn reset_reads(&self) {
        self.reads.set(0);
    }

    /// Copy with only the modalities in `keep` present.
    pub fn restricted(&self, keep: SubsetMask) -> Result<Self> {
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(j, t)| if keep.contains(j) { t.clone() } else { None })
            .collect();
        Self::new(data, self.labels.clone())
    }
}

/// Columnar dataset: modality `j` is an `[N, D_j]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(modalities: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = labels.len();
        for t in &modalities {
            if t.rank() != 2 || t.shape()[0] != n {
                return Err(Error::DimMismatch {
                    expected: n,
                    got: t.shape().first().copied().unwrap_or(0),
                });
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::TargetOutOfRange {
                index: bad as f64,
                classes,
            });
        }
        Ok(Self {
            modalities,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|t| t.shape()[1]).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<MultimodalBatch> {
        let data = self
            .modalities
            .iter()
            .map(|t| Some(t.select_rows(indices)))
            .collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        MultimodalBatch::new(data, Some(labels))
    }

    pub fn sample(&self, i: usize) -> MultimodalSample {
        MultimodalSample {
            modalities: self.modalities.iter().map(|t| Some(t.row(i).to_vec())).collect(),
            label: Some(self.labels[i]),
        }
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset {
            modalities: self.modalities.iter().map(|t| t.select_rows(&idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}
