//! Generation coherence judged by pretrained classifiers.
//!
//! Bernoulli outputs are decoded to their means and binarized at 0.5 before
//! classification, matching the binary training data.

use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::distributions::LikelihoodKind;
use crate::error::{Error, Result};
use crate::fusion::{FusionOptions, SubsetMask};
use crate::model::{likelihood_mean, Model, ModelConfig, ParameterStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

use super::classifier::{ensure_strong, Classifier, COHERENCE_THRESHOLD};
use super::{chunks, encode_batch, subset_posterior};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoherenceMode {
    /// Generate `target` from the posterior of `subset`.
    Conditional { subset: SubsetMask, target: usize },
    /// Generate every modality from one prior sample.
    Joint { samples: usize },
}

fn normal(rng: &mut Rng, shape: Vec<usize>) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())?)
}

/// Decoded data-space samples of modality `j` for latents `z`.
fn generate<'g>(
    graph: &'g Graph,
    model: &Model<'_, 'g>,
    j: usize,
    z: Var<'g>,
    rng: &mut Rng,
) -> Result<Tensor> {
    let config = model.config;
    let rows = z.shape()[0];
    let style = if config.factorized {
        Some(graph.constant(normal(rng, vec![rows, config.style_dim])?))
    } else {
        None
    };
    let spec = &config.modalities[j].likelihood;
    let mut mean = likelihood_mean(spec, &model.decode(j, z, style)?.value());
    if spec.kind == LikelihoodKind::BernoulliLogits {
        for v in mean.data_mut() {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(mean)
}

/// Fraction of test rows whose generated `target` is classified as the
/// row's label when conditioning on `subset`.
#[allow(clippy::too_many_arguments)]
pub fn conditional_coherence<C: Classifier>(
    config: &ModelConfig,
    params: &ParameterStore,
    classifiers: &[C],
    dataset: &Dataset,
    subset: SubsetMask,
    target: usize,
    fusion: &FusionOptions,
    seed: u64,
) -> Result<f64> {
    ensure_strong(classifiers, COHERENCE_THRESHOLD)?;
    let judge = classifiers.get(target).ok_or(Error::DimMismatch {
        expected: classifiers.len(),
        got: target + 1,
    })?;
    let l = config.latent_dim;
    let mut hits = 0usize;
    for (rows, mut rng) in chunks(dataset.len(), seed) {
        let graph = Graph::new();
        let model = Model::bind(config, params, &graph, false);
        let batch = dataset.batch(&rows)?;
        let encoded = encode_batch(&graph, &model, &batch, Some(subset))?;
        let q = subset_posterior(&graph, &encoded, subset, fusion, rows.len(), l)?;
        let z = q.sample(&graph, &[], &mut rng)?;
        let x = generate(&graph, &model, target, z, &mut rng)?;
        let predicted = judge.predict(&x)?;
        hits += predicted
            .iter()
            .zip(&rows)
            .filter(|(p, &r)| **p == dataset.labels[r])
            .count();
    }
    Ok(hits as f64 / dataset.len().max(1) as f64)
}

/// Fraction of prior samples whose generated modalities all receive the
/// same class.
pub fn joint_coherence<C: Classifier>(
    config: &ModelConfig,
    params: &ParameterStore,
    classifiers: &[C],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    ensure_strong(classifiers, COHERENCE_THRESHOLD)?;
    let m = config.num_modalities();
    if classifiers.len() != m {
        return Err(Error::DimMismatch {
            expected: m,
            got: classifiers.len(),
        });
    }
    let l = config.latent_dim;
    let mut hits = 0usize;
    for (rows, mut rng) in chunks(samples, seed) {
        let graph = Graph::new();
        let model = Model::bind(config, params, &graph, false);
        let z = graph.constant(normal(&mut rng, vec![rows.len(), l])?);
        let mut votes: Vec<Vec<usize>> = Vec::with_capacity(m);
        for (j, judge) in classifiers.iter().enumerate() {
            votes.push(judge.predict(&generate(&graph, &model, j, z, &mut rng)?)?);
        }
        hits += (0..rows.len())
            .filter(|&r| votes.iter().all(|v| v[r] == votes[0][r]))
            .count();
    }
    Ok(hits as f64 / samples.max(1) as f64)
}

/// Dispatches on `mode`; joint mode ignores `dataset`.
#[allow(clippy::too_many_arguments)]
pub fn coherence<C: Classifier>(
    config: &ModelConfig,
    params: &ParameterStore,
    classifiers: &[C],
    dataset: &Dataset,
    mode: CoherenceMode,
    fusion: &FusionOptions,
    seed: u64,
) -> Result<f64> {
    match mode {
        CoherenceMode::Conditional { subset, target } => conditional_coherence(
            config,
            params,
            classifiers,
            dataset,
            subset,
            target,
            fusion,
            seed,
        ),
        CoherenceMode::Joint { samples } => {
            joint_coherence(config, params, classifiers, samples, seed)
        }
    }
}
