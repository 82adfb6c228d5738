//! Linear probe on frozen posterior means.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{FusionOptions, SubsetMask};
use crate::model::{Model, ModelConfig, ParameterStore};
use crate::tensor::{Graph, Tensor};

use super::{chunks, encode_batch, subset_posterior};

pub const PROBE_TRAIN_SAMPLES: usize = 500;
pub const PROBE_RIDGE: f64 = 1e-4;
pub const PROBE_ITERATIONS: usize = 2000;

/// Multinomial logistic regression on standardized features, fitted by
/// full-batch gradient descent from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[(D + 1) * C]`, bias row last.
    weights: Vec<f64>,
}

impl LogisticProbe {
    pub fn fit(features: &Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        Self::fit_with(features, labels, classes, PROBE_RIDGE, PROBE_ITERATIONS)
    }

    pub fn fit_with(
        features: &Tensor,
        labels: &[usize],
        classes: usize,
        ridge: f64,
        iterations: usize,
    ) -> Result<Self> {
        let (n, d) = (features.shape()[0], features.shape()[1]);
        if n != labels.len() {
            return Err(Error::DimMismatch {
                expected: n,
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::TargetOutOfRange {
                index: bad as f64,
                classes,
            });
        }
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for row in features.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        for row in features.data().chunks(d) {
            for k in 0..d {
                scale[k] += (row[k] - mean[k]).powi(2) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let mut probe = Self {
            classes,
            mean,
            scale,
            weights: vec![0.0; (d + 1) * classes],
        };
        let x: Vec<Vec<f64>> = features.data().chunks(d).map(|r| probe.augment(r)).collect();
        // Softmax cross-entropy curvature is at most half the largest
        // eigenvalue of the second-moment matrix, itself at most its trace.
        let trace = x.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n as f64;
        let lr = 1.0 / (0.5 * trace + ridge);
        let mut grad = vec![0.0; probe.weights.len()];
        for _ in 0..iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (row, &y) in x.iter().zip(labels) {
                let p = probe.softmax(row);
                for c in 0..classes {
                    let r = p[c] - f64::from(c == y);
                    for (k, v) in row.iter().enumerate() {
                        grad[k * classes + c] += r * v / n as f64;
                    }
                }
            }
            for k in 0..d * classes {
                grad[k] += ridge * probe.weights[k];
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
        }
        Ok(probe)
    }

    fn augment(&self, row: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = row
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        out.push(1.0);
        out
    }

    fn softmax(&self, x: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut logits = vec![0.0; c];
        for (k, v) in x.iter().enumerate() {
            for (l, w) in logits.iter_mut().zip(&self.weights[k * c..(k + 1) * c]) {
                *l += v * w;
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in &mut logits {
            *l = (*l - max).exp();
            total += *l;
        }
        logits.iter().map(|l| l / total).collect()
    }

    pub fn predict(&self, features: &Tensor) -> Vec<usize> {
        let d = self.mean.len();
        features
            .data()
            .chunks(d)
            .map(|row| {
                let p = self.softmax(&self.augment(row));
                (0..self.classes)
                    .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
                    .expect("at least one class")
            })
            .collect()
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> f64 {
        let hits = self
            .predict(features)
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Posterior means of `mask` for every row of `dataset`, `[N, L]`.
pub fn posterior_means(
    config: &ModelConfig,
    params: &ParameterStore,
    dataset: &Dataset,
    mask: SubsetMask,
    fusion: &FusionOptions,
) -> Result<Tensor> {
    let l = config.latent_dim;
    let mut out = Vec::with_capacity(dataset.len() * l);
    for (rows, _) in chunks(dataset.len(), 0) {
        let graph = Graph::new();
        let model = Model::bind(config, params, &graph, false);
        let batch = dataset.batch(&rows)?;
        let encoded = encode_batch(&graph, &model, &batch, Some(mask))?;
        let q = subset_posterior(&graph, &encoded, mask, fusion, rows.len(), l)?;
        out.extend_from_slice(q.mean()?.data());
    }
    Ok(Tensor::matrix(dataset.len(), l, out)?)
}

/// Probe accuracy on all of `test` after fitting on the first
/// [`PROBE_TRAIN_SAMPLES`] rows of `train`, per subset.
pub fn linear_probe(
    config: &ModelConfig,
    params: &ParameterStore,
    train: &Dataset,
    test: &Dataset,
    masks: &[SubsetMask],
    fusion: &FusionOptions,
) -> Result<Vec<(SubsetMask, f64)>> {
    if train.len() < PROBE_TRAIN_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: PROBE_TRAIN_SAMPLES,
            got: train.len(),
        });
    }
    let fit_set = train.head(PROBE_TRAIN_SAMPLES);
    masks
        .iter()
        .map(|&mask| {
            let f_train = posterior_means(config, params, &fit_set, mask, fusion)?;
            let f_test = posterior_means(config, params, test, mask, fusion)?;
            let probe = LogisticProbe::fit(&f_train, &fit_set.labels, train.classes)?;
            Ok((mask, probe.accuracy(&f_test, &test.labels)))
        })
        .collect()
}
