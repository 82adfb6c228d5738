//! Importance-weighted log-likelihood estimates.

use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::distributions::{
    log_sum_exp, recon_log_prob_var, standard_normal_log_prob_var, DiagonalGaussian,
};
use crate::error::{Error, Result};
use crate::fusion::{FusionOptions, SubsetMask};
use crate::model::{Model, ModelConfig, ParameterStore};
use crate::oracle::FullGaussian;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

use super::{chunks, encode_batch, subset_posterior, SubsetPosterior};

pub const DEFAULT_IMPORTANCE_SAMPLES: usize = 15;

/// A sampler with a tractable density.
pub trait Proposal {
    fn sample(&self, rng: &mut Rng) -> Vec<f64>;
    fn log_prob(&self, z: &[f64]) -> f64;
}

impl Proposal for DiagonalGaussian {
    fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.rsample(rng)
    }

    fn log_prob(&self, z: &[f64]) -> f64 {
        DiagonalGaussian::log_prob(self, z).expect("sample dimension matches proposal")
    }
}

impl Proposal for FullGaussian {
    fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        FullGaussian::sample(self, rng)
    }

    fn log_prob(&self, z: &[f64]) -> f64 {
        FullGaussian::log_prob(self, z)
    }
}

/// `logsumexp_s[log p(x, z_s) - log q(z_s)] - log S` with `z_s ~ q`.
pub fn importance_log_likelihood<P: Proposal>(
    log_joint: impl Fn(&[f64]) -> f64,
    proposal: &P,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::ConfigInvalid("importance samples must be at least 1".into()));
    }
    let log_w: Vec<f64> = (0..samples)
        .map(|_| {
            let z = proposal.sample(rng);
            log_joint(&z) - proposal.log_prob(&z)
        })
        .collect();
    Ok(log_sum_exp(&log_w) - (samples as f64).ln())
}

fn normal(rng: &mut Rng, shape: Vec<usize>) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())?)
}

/// Per-row log importance weights `[S, B]` of `log p(X, z) / q(z | X_mask)`
/// with every modality of the batch scored under its unweighted likelihood.
fn log_weights<'g>(
    graph: &'g Graph,
    model: &Model<'_, 'g>,
    batch: &crate::data::MultimodalBatch,
    mask: SubsetMask,
    fusion: &FusionOptions,
    samples: usize,
    rng: &mut Rng,
) -> Result<Var<'g>> {
    let config = model.config;
    let (b, l) = (batch.batch_size(), config.latent_dim);
    let encoded = encode_batch(graph, model, batch, None)?;
    let q = subset_posterior(graph, &encoded, mask, fusion, b, l)?;
    let z = q.sample(graph, &[samples], rng)?;
    let mut log_w = standard_normal_log_prob_var(z)?.sub(q.log_prob(z)?)?;
    let z_flat = z.reshape(&[samples * b, l])?;
    for (j, enc) in encoded.iter().enumerate() {
        let Some(enc) = enc else { continue };
        let x = graph.constant(batch.observed(j).expect("present modality").clone());
        let style = match enc.style {
            Some(qs) => {
                let sd = config.style_dim;
                let s = qs.rsample_with(graph.constant(normal(rng, vec![samples, b, sd])?))?;
                log_w = log_w
                    .add(standard_normal_log_prob_var(s)?)?
                    .sub(qs.log_prob(s)?)?;
                Some(s.reshape(&[samples * b, sd])?)
            }
            None => None,
        };
        let mut spec = config.modalities[j].likelihood;
        spec.weight = 1.0;
        let d = spec.data_dims;
        let params = model.decode(j, z_flat, style)?.reshape(&[samples, b, d])?;
        log_w = log_w.add(recon_log_prob_var(&spec, params, x)?)?;
    }
    Ok(log_w)
}

/// Test-set mean and standard error of the importance-weighted bound,
/// conditioning the proposal on each subset in turn.
///
/// Every subset sees the same per-chunk noise streams.
pub fn iwae_log_likelihood(
    config: &ModelConfig,
    params: &ParameterStore,
    dataset: &Dataset,
    masks: &[SubsetMask],
    samples: usize,
    fusion: &FusionOptions,
    seed: u64,
) -> Result<Vec<(SubsetMask, f64, f64)>> {
    if samples == 0 {
        return Err(Error::ConfigInvalid("importance samples must be at least 1".into()));
    }
    let log_s = (samples as f64).ln();
    masks
        .iter()
        .map(|&mask| {
            let mut values = Vec::with_capacity(dataset.len());
            for (rows, mut rng) in chunks(dataset.len(), seed) {
                let graph = Graph::new();
                let model = Model::bind(config, params, &graph, false);
                let batch = dataset.batch(&rows)?;
                let log_w = log_weights(&graph, &model, &batch, mask, fusion, samples, &mut rng)?;
                let per_row = log_w.logsumexp(0)?.shift(-log_s)?.value();
                values.extend_from_slice(per_row.data());
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            Ok((mask, mean, (var / n).sqrt()))
        })
        .collect()
}

/// Product posterior of `mask` for one row, for use as a [`Proposal`].
pub fn row_posterior(
    config: &ModelConfig,
    params: &ParameterStore,
    dataset: &Dataset,
    row: usize,
    mask: SubsetMask,
    fusion: &FusionOptions,
) -> Result<DiagonalGaussian> {
    let graph = Graph::new();
    let model = Model::bind(config, params, &graph, false);
    let batch = dataset.batch(&[row])?;
    let encoded = encode_batch(&graph, &model, &batch, Some(mask))?;
    let product = FusionOptions {
        eval_mean: None,
        ..*fusion
    };
    match subset_posterior(&graph, &encoded, mask, &product, 1, config.latent_dim)? {
        SubsetPosterior::Product(q) => DiagonalGaussian::new(q.mu.value().into_data(), q.log_var.value().into_data()),
        SubsetPosterior::Mixture(_) => unreachable!("products requested"),
    }
}
