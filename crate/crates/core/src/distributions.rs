//! Diagonal Gaussians, mixtures, and per-modality likelihoods.
//!
//! Value-level types ([`DiagonalGaussian`], [`GaussianMixture`]) serve the
//! oracle and evaluation code; [`GaussianVar`] and the `*_var` functions are
//! their batched, differentiable counterparts used inside objective graphs.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{softplus, Tensor, Var};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub(crate) const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// `N(mu, diag(exp(log_var)))` with log-variances clamped to
/// `[LOG_VAR_MIN, LOG_VAR_MAX]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::DimMismatch {
                expected: mu.len(),
                got: log_var.len(),
            });
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Self { mu, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(self.log_prob_unchecked(z))
    }

    pub(crate) fn log_prob_unchecked(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.mu)
            .zip(&self.log_var)
            .map(|((z, m), lv)| -HALF_LOG_2PI - 0.5 * lv - (z - m).powi(2) / (2.0 * lv.exp()))
            .sum()
    }

    /// `mu + exp(log_var / 2) * eps`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    pub fn rsample(&self, rng: &mut Rng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        self.reparameterize(&eps)
    }

    /// Closed-form `KL(self || N(0, I))`.
    pub fn kl_to_standard_normal(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>()
    }
}

pub fn gaussian_log_prob(q: &DiagonalGaussian, z: &[f64]) -> Result<f64> {
    q.log_prob(z)
}

pub fn kl_to_standard_normal(q: &DiagonalGaussian) -> f64 {
    q.kl_to_standard_normal()
}

pub fn rsample(q: &DiagonalGaussian, rng: &mut Rng) -> Vec<f64> {
    q.rsample(rng)
}

/// Finite mixture of diagonal Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<DiagonalGaussian>,
    weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<DiagonalGaussian>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidWeights("mixture has no components".into()));
        }
        if components.len() != weights.len() {
            return Err(Error::InvalidWeights(format!(
                "{} components but {} weights",
                components.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidWeights("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() >= 1e-12 {
            return Err(Error::InvalidWeights(format!("weights sum to {total}")));
        }
        let dim = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: c.dim(),
            });
        }
        Ok(Self {
            components,
            weights,
        })
    }

    pub fn uniform(components: Vec<DiagonalGaussian>) -> Result<Self> {
        let k = components.len().max(1);
        Self::new(components, vec![1.0 / k as f64; k])
    }

    pub fn components(&self) -> &[DiagonalGaussian] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w.ln() + c.log_prob_unchecked(z))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Ancestral sample: pick a component by weight, then draw from it.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let u: f64 = rand::Rng::random(rng);
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        self.components[pick].rsample(rng)
    }
}

pub fn mixture_log_prob(m: &GaussianMixture, z: &[f64]) -> Result<f64> {
    m.log_prob(z)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LikelihoodKind {
    BernoulliLogits,
    CategoricalLogits,
    GaussianFixedVar { variance: f64 },
}

/// Output likelihood of one modality and its reconstruction weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodSpec {
    pub kind: LikelihoodKind,
    pub data_dims: usize,
    pub weight: f64,
}

impl LikelihoodSpec {
    pub fn bernoulli(data_dims: usize) -> Self {
        Self {
            kind: LikelihoodKind::BernoulliLogits,
            data_dims,
            weight: 1.0,
        }
    }

    pub fn categorical(classes: usize) -> Self {
        Self {
            kind: LikelihoodKind::CategoricalLogits,
            data_dims: classes,
            weight: 1.0,
        }
    }

    pub fn gaussian(data_dims: usize, variance: f64) -> Self {
        Self {
            kind: LikelihoodKind::GaussianFixedVar { variance },
            data_dims,
            weight: 1.0,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight > 0.0) || !self.weight.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "likelihood weight must be positive, got {}",
                self.weight
            )));
        }
        if self.data_dims == 0 {
            return Err(Error::ConfigInvalid("likelihood data_dims must be > 0".into()));
        }
        if let LikelihoodKind::GaussianFixedVar { variance } = self.kind {
            if !(variance > 0.0) {
                return Err(Error::ConfigInvalid(format!(
                    "gaussian likelihood variance must be positive, got {variance}"
                )));
            }
        }
        Ok(())
    }
}

/// Reconstruction weights that put the largest modality at 1.0 and scale the
/// others up by the ratio of data dimensions.
pub fn default_likelihood_weights(dims: &[usize]) -> Vec<f64> {
    let largest = dims.iter().copied().max().unwrap_or(1) as f64;
    dims.iter().map(|&d| largest / d as f64).collect()
}

/// `weight * log p(x | params)` for a single observation.
///
/// For categorical likelihoods `x` holds one class index.
pub fn recon_log_prob(spec: &LikelihoodSpec, params: &[f64], x: &[f64]) -> Result<f64> {
    if params.len() != spec.data_dims {
        return Err(Error::DimMismatch {
            expected: spec.data_dims,
            got: params.len(),
        });
    }
    let lp = match spec.kind {
        LikelihoodKind::BernoulliLogits => {
            if x.len() != spec.data_dims {
                return Err(Error::DimMismatch {
                    expected: spec.data_dims,
                    got: x.len(),
                });
            }
            params
                .iter()
                .zip(x)
                .map(|(l, x)| x * l - softplus(*l))
                .sum()
        }
        LikelihoodKind::CategoricalLogits => {
            if x.len() != 1 {
                return Err(Error::DimMismatch {
                    expected: 1,
                    got: x.len(),
                });
            }
            let idx = class_index(x[0], spec.data_dims)?;
            params[idx] - log_sum_exp(params)
        }
        LikelihoodKind::GaussianFixedVar { variance } => {
            if x.len() != spec.data_dims {
                return Err(Error::DimMismatch {
                    expected: spec.data_dims,
                    got: x.len(),
                });
            }
            params
                .iter()
                .zip(x)
                .map(|(m, x)| -HALF_LOG_2PI - 0.5 * variance.ln() - (x - m).powi(2) / (2.0 * variance))
                .sum()
        }
    };
    Ok(spec.weight * lp)
}

fn class_index(v: f64, classes: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v >= classes as f64 {
        return Err(Error::TargetOutOfRange { index: v, classes });
    }
    Ok(v as usize)
}

/// Batched diagonal Gaussian on a graph: `mu` and `log_var` share a shape
/// whose last axis is the latent dimension.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVar<'g> {
    pub mu: Var<'g>,
    pub log_var: Var<'g>,
}

impl<'g> GaussianVar<'g> {
    /// Standard normal with the given batch shape `[.., dim]`.
    pub fn standard(graph: &'g crate::tensor::Graph, shape: &[usize]) -> Self {
        Self {
            mu: graph.constant(Tensor::zeros(shape.to_vec())),
            log_var: graph.constant(Tensor::zeros(shape.to_vec())),
        }
    }

    /// `mu + exp(log_var / 2) * eps`, broadcasting over leading axes of `eps`.
    pub fn rsample_with(&self, eps: Var<'g>) -> Result<Var<'g>> {
        let std = self.log_var.scale(0.5)?.exp()?;
        Ok(self.mu.add(std.mul(eps)?)?)
    }

    /// Closed-form KL to `N(0, I)`, summed over the last axis.
    pub fn kl_to_standard_normal(&self) -> Result<Var<'g>> {
        let last = self.mu.shape().len() - 1;
        let terms = self
            .mu
            .square()?
            .add(self.log_var.exp()?)?
            .sub(self.log_var)?
            .shift(-1.0)?;
        Ok(terms.sum_axis(last)?.scale(0.5)?)
    }

    /// Log-density at `z` summed over the last axis.
    pub fn log_prob(&self, z: Var<'g>) -> Result<Var<'g>> {
        let diff = z.sub(self.mu)?;
        let quad = diff.square()?.div(self.log_var.exp()?)?;
        let terms = quad.add(self.log_var)?.shift(2.0 * HALF_LOG_2PI)?.scale(-0.5)?;
        let last = terms.shape().len() - 1;
        Ok(terms.sum_axis(last)?)
    }
}

/// `log N(z; 0, I)` summed over the last axis.
pub fn standard_normal_log_prob_var(z: Var<'_>) -> Result<Var<'_>> {
    let last = z.shape().len() - 1;
    Ok(z.square()?.shift(2.0 * HALF_LOG_2PI)?.scale(-0.5)?.sum_axis(last)?)
}

/// `weight * log p(x | params)` summed over the last axis.
///
/// `params` is `[.., D]`; `x` must broadcast against it. Categorical targets
/// are given one-hot.
pub fn recon_log_prob_var<'g>(
    spec: &LikelihoodSpec,
    params: Var<'g>,
    x: Var<'g>,
) -> Result<Var<'g>> {
    let shape = params.shape();
    let last = shape.len() - 1;
    if shape[last] != spec.data_dims {
        return Err(Error::DimMismatch {
            expected: spec.data_dims,
            got: shape[last],
        });
    }
    let per_dim = match spec.kind {
        // x log σ(l) + (1 - x) log(1 - σ(l)) = x l - softplus(l)
        LikelihoodKind::BernoulliLogits => x.mul(params)?.sub(params.softplus()?)?,
        LikelihoodKind::CategoricalLogits => x.mul(params.log_softmax()?)?,
        LikelihoodKind::GaussianFixedVar { variance } => x
            .sub(params)?
            .square()?
            .scale(-0.5 / variance)?
            .shift(-HALF_LOG_2PI - 0.5 * variance.ln())?,
    };
    Ok(per_dim.sum_axis(last)?.scale(spec.weight)?)
}

/// One-hot rows for categorical targets stored as class indices.
pub fn one_hot(indices: &[f64], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; indices.len() * classes];
    for (r, &v) in indices.iter().enumerate() {
        data[r * classes + class_index(v, classes)?] = 1.0;
    }
    Ok(Tensor::matrix(indices.len(), classes, data)?)
}
