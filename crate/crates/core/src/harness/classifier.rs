//! Per-modality classifiers that judge generated samples.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distributions::one_hot;
use crate::error::{Error, Result};
use crate::model::{read_container, write_container};
use crate::rng::{seeded, substream};
use crate::tensor::{Graph, Optimizer, Tensor, Var};

/// Minimum test accuracy for a classifier to be trusted as a judge.
pub const COHERENCE_THRESHOLD: f64 = 0.95;

pub trait Classifier {
    /// Class index per row of `x`.
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>>;
    /// Held-out accuracy the classifier reached.
    fn accuracy(&self) -> f64;
}

/// Errors unless every classifier reaches `threshold`.
pub fn ensure_strong<C: Classifier>(classifiers: &[C], threshold: f64) -> Result<()> {
    for (modality, c) in classifiers.iter().enumerate() {
        if !(c.accuracy() >= threshold) {
            return Err(Error::ClassifierTooWeak {
                modality,
                accuracy: c.accuracy(),
                threshold,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Softplus MLP ending in class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    pub modality: usize,
    pub classes: usize,
    pub params: BTreeMap<String, Tensor>,
    pub layers: usize,
    pub test_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierMeta {
    modality: usize,
    classes: usize,
    layers: usize,
    test_accuracy: f64,
}

fn layer_name(i: usize, part: &str) -> String {
    format!("{i}.{part}")
}

fn forward<'g>(params: &BTreeMap<String, Var<'g>>, layers: usize, x: Var<'g>) -> Result<Var<'g>> {
    let mut h = x;
    for i in 0..layers {
        h = h
            .matmul(params[&layer_name(i, "weight")])?
            .add(params[&layer_name(i, "bias")])?;
        if i + 1 < layers {
            h = h.softplus()?;
        }
    }
    Ok(h)
}

impl MlpClassifier {
    /// Fits on `train` modality `j` and records accuracy on `test`.
    pub fn train(
        train: &Dataset,
        test: &Dataset,
        modality: usize,
        hidden: &[usize],
        cfg: &ClassifierTrainConfig,
    ) -> Result<Self> {
        if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
            return Err(Error::ConfigInvalid(
                "classifier batch size and learning rate must be positive".into(),
            ));
        }
        let input = train.dims()[modality];
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(train.classes);
        let mut init = seeded(cfg.seed ^ (modality as u64).wrapping_mul(0x9e37_79b9));
        let mut params = BTreeMap::new();
        for (i, w) in widths.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let data = (0..w[0] * w[1]).map(|_| init.random_range(-bound..bound)).collect();
            params.insert(layer_name(i, "weight"), Tensor::matrix(w[0], w[1], data)?);
            params.insert(layer_name(i, "bias"), Tensor::zeros(vec![w[1]]));
        }
        let layers = widths.len() - 1;
        let targets = one_hot(
            &train.labels.iter().map(|&l| l as f64).collect::<Vec<_>>(),
            train.classes,
        )?;
        let x = &train.modalities[modality];
        let mut opt = Optimizer::adam(cfg.learning_rate);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle = substream(cfg.seed, 1 + modality as u64);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle);
            for rows in order.chunks(cfg.batch_size) {
                let graph = Graph::new();
                let vars: BTreeMap<String, Var<'_>> = params
                    .iter()
                    .map(|(k, v)| (k.clone(), graph.param(v.clone())))
                    .collect();
                let logits = forward(&vars, layers, graph.constant(x.select_rows(rows)))?;
                let y = graph.constant(targets.select_rows(rows));
                let loss = y.mul(logits.log_softmax()?)?.sum_axis(1)?.mean()?.neg()?;
                let grads = graph.backward(loss)?;
                let grads = vars
                    .iter()
                    .map(|(k, v)| (k.clone(), grads.get(*v).expect("parameter leaf")))
                    .collect();
                opt.step(&mut params, &grads)?;
            }
        }
        let mut out = Self {
            modality,
            classes: train.classes,
            params,
            layers,
            test_accuracy: 0.0,
        };
        let predicted = out.predict(&test.modalities[modality])?;
        let hits = predicted.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
        out.test_accuracy = hits as f64 / test.len().max(1) as f64;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ClassifierMeta {
            modality: self.modality,
            classes: self.classes,
            layers: self.layers,
            test_accuracy: self.test_accuracy,
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::CorruptPayload(e.to_string()))?;
        write_container(path, meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = read_container(path)?;
        let meta: ClassifierMeta =
            serde_json::from_value(meta).map_err(|e| Error::CorruptPayload(e.to_string()))?;
        for i in 0..meta.layers {
            for part in ["weight", "bias"] {
                if !params.contains_key(&layer_name(i, part)) {
                    return Err(Error::CorruptPayload(format!(
                        "classifier is missing `{}`",
                        layer_name(i, part)
                    )));
                }
            }
        }
        Ok(Self {
            modality: meta.modality,
            classes: meta.classes,
            params,
            layers: meta.layers,
            test_accuracy: meta.test_accuracy,
        })
    }
}

impl Classifier for MlpClassifier {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let graph = Graph::new();
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
            .collect();
        let logits = forward(&vars, self.layers, graph.constant(x.clone()))?.value();
        Ok(logits
            .data()
            .chunks(self.classes)
            .map(|row| {
                (0..self.classes)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .expect("at least one class")
            })
            .collect())
    }

    fn accuracy(&self) -> f64 {
        self.test_accuracy
    }
}

/// One classifier per modality with the encoder's hidden widths; errors with
/// [`Error::ClassifierTooWeak`] if any falls below [`COHERENCE_THRESHOLD`].
pub fn train_coherence_classifiers(
    train: &Dataset,
    test: &Dataset,
    hidden: &[usize],
    cfg: &ClassifierTrainConfig,
) -> Result<Vec<MlpClassifier>> {
    let bank = (0..train.num_modalities())
        .map(|j| MlpClassifier::train(train, test, j, hidden, cfg))
        .collect::<Result<Vec<_>>>()?;
    ensure_strong(&bank, COHERENCE_THRESHOLD)?;
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{generate_dataset, SyntheticSetConfig};

    fn data(noise: f64) -> (Dataset, Dataset) {
        generate_dataset(&SyntheticSetConfig {
            modalities: 2,
            train: 600,
            test: 200,
            noise,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn clean_data_is_classified() {
        let (train, test) = data(0.0);
        let cfg = ClassifierTrainConfig {
            epochs: 40,
            ..Default::default()
        };
        let bank = train_coherence_classifiers(&train, &test, &[32], &cfg).unwrap();
        assert!(bank.iter().all(|c| c.accuracy() >= 0.999));
        let again = train_coherence_classifiers(&train, &test, &[32], &cfg).unwrap();
        assert_eq!(bank, again);
    }

    #[test]
    fn shuffled_labels_are_rejected() {
        let (mut train, mut test) = data(0.25);
        let mut rng = seeded(3);
        train.labels.shuffle(&mut rng);
        test.labels.shuffle(&mut rng);
        let cfg = ClassifierTrainConfig {
            epochs: 2,
            ..Default::default()
        };
        assert!(matches!(
            train_coherence_classifiers(&train, &test, &[32], &cfg),
            Err(Error::ClassifierTooWeak { .. })
        ));
    }

    #[test]
    fn save_and_load() {
        let (train, test) = data(0.0);
        let cfg = ClassifierTrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let c = MlpClassifier::train(&train, &test, 1, &[8], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.bin");
        c.save(&path).unwrap();
        assert_eq!(MlpClassifier::load(&path).unwrap(), c);
    }
}
