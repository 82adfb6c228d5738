//! MLP encoders and decoders, the parameter registry, and checkpoints.
//!
//! Parameters live in a [`ParameterStore`] keyed by path:
//! `enc.{j}.{layer}.weight` / `.bias` for the encoder of modality `j` and
//! `dec.{j}.{layer}.*` for its decoder. Weights are `[fan_in, fan_out]` and
//! layers compute `x W + b` with softplus between hidden layers.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_container, save_checkpoint, write_container, Checkpoint};

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::distributions::{GaussianVar, LikelihoodKind, LikelihoodSpec, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{Error, Result};
use crate::fusion::MAX_MODALITIES;
use crate::rng::seeded;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    /// Widths of the hidden layers, shared by encoder and decoder.
    pub hidden: Vec<usize>,
    /// Output likelihood; its `data_dims` is also the encoder input size.
    pub likelihood: LikelihoodSpec,
}

impl ModalityConfig {
    pub fn input_dim(&self) -> usize {
        self.likelihood.data_dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub modalities: Vec<ModalityConfig>,
    #[serde(default)]
    pub factorized: bool,
    #[serde(default)]
    pub style_dim: usize,
}

impl ModelConfig {
    /// Bernoulli image modalities with reconstruction weights scaled by size.
    pub fn bernoulli(dims: &[usize], latent_dim: usize, hidden: &[usize]) -> Self {
        let weights = crate::distributions::default_likelihood_weights(dims);
        Self {
            latent_dim,
            modalities: dims
                .iter()
                .zip(weights)
                .map(|(&d, w)| ModalityConfig {
                    hidden: hidden.to_vec(),
                    likelihood: LikelihoodSpec::bernoulli(d).with_weight(w),
                })
                .collect(),
            factorized: false,
            style_dim: 0,
        }
    }

    pub fn with_style(mut self, style_dim: usize) -> Self {
        self.factorized = true;
        self.style_dim = style_dim;
        self
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Size of the style latent, zero when not factorized.
    pub fn style(&self) -> usize {
        if self.factorized {
            self.style_dim
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_modalities();
        if m == 0 || m > MAX_MODALITIES {
            return Err(Error::MTooLarge(m));
        }
        if self.latent_dim == 0 {
            return Err(Error::ConfigInvalid("latent_dim must be at least 1".into()));
        }
        if self.factorized && self.style_dim == 0 {
            return Err(Error::ConfigInvalid(
                "factorized models need style_dim > 0".into(),
            ));
        }
        for (j, mc) in self.modalities.iter().enumerate() {
            mc.likelihood.validate()?;
            if mc.hidden.contains(&0) {
                return Err(Error::ConfigInvalid(format!(
                    "modality {j} has a hidden layer of width 0"
                )));
            }
        }
        Ok(())
    }

    /// `(name prefix, fan_in, fan_out)` for every layer, in store order.
    pub fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let (l, s) = (self.latent_dim, self.style());
        for (j, mc) in self.modalities.iter().enumerate() {
            let mut widths = vec![mc.input_dim()];
            widths.extend(&mc.hidden);
            widths.push(2 * (l + s));
            for (i, w) in widths.windows(2).enumerate() {
                out.push((format!("enc.{j}.{i}"), w[0], w[1]));
            }
            let mut widths = vec![l + s];
            widths.extend(&mc.hidden);
            widths.push(mc.input_dim());
            for (i, w) in widths.windows(2).enumerate() {
                out.push((format!("dec.{j}.{i}"), w[0], w[1]));
            }
        }
        out
    }

    /// `sum over layers of (fan_in + 1) * fan_out`.
    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|(_, i, o)| (i + 1) * o).sum()
    }
}

/// Named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn from_map(params: BTreeMap<String, Tensor>) -> Self {
        Self { params }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut params = BTreeMap::new();
        for (name, fan_in, fan_out) in config.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.insert(format!("{name}.weight"), Tensor::matrix(fan_in, fan_out, w)?);
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        }
        Ok(Self { params })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, fan_in, fan_out) in config.layers() {
            params.insert(format!("{name}.weight"), Tensor::zeros(vec![fan_in, fan_out]));
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        }
        Ok(Self { params })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn as_map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Names of encoder (`φ`) parameters.
    pub fn encoder_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().filter(|k| k.starts_with("enc.")).map(String::as_str)
    }

    /// Names of decoder (`θ`) parameters.
    pub fn decoder_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().filter(|k| k.starts_with("dec.")).map(String::as_str)
    }

    /// Places every parameter on `graph`, as leaves when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BTreeMap<String, Var<'g>> {
        self.params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    graph.param(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect()
    }
}

/// Unimodal encoder output: shared latent and, when factorized, the style latent.
#[derive(Debug, Clone, Copy)]
pub struct Encoded<'g> {
    pub shared: GaussianVar<'g>,
    pub style: Option<GaussianVar<'g>>,
}

/// Model parameters bound to a graph.
pub struct Model<'a, 'g> {
    pub config: &'a ModelConfig,
    pub vars: BTreeMap<String, Var<'g>>,
}

impl<'a, 'g> Model<'a, 'g> {
    pub fn new(config: &'a ModelConfig, vars: BTreeMap<String, Var<'g>>) -> Self {
        Self { config, vars }
    }

    pub fn bind(
        config: &'a ModelConfig,
        store: &ParameterStore,
        graph: &'g Graph,
        trainable: bool,
    ) -> Self {
        Self::new(config, store.bind(graph, trainable))
    }

    fn var(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::ConfigInvalid(format!("missing parameter `{name}`")))
    }

    fn mlp(&self, prefix: &str, j: usize, layers: usize, mut h: Var<'g>) -> Result<Var<'g>> {
        for i in 0..layers {
            let w = self.var(&format!("{prefix}.{j}.{i}.weight"))?;
            let b = self.var(&format!("{prefix}.{j}.{i}.bias"))?;
            h = h.matmul(w)?.add(b)?;
            if i + 1 < layers {
                h = h.softplus()?;
            }
        }
        Ok(h)
    }

    fn check_modality(&self, j: usize) -> Result<&'a ModalityConfig> {
        self.config.modalities.get(j).ok_or(Error::DimMismatch {
            expected: self.config.num_modalities(),
            got: j + 1,
        })
    }

    /// Encodes `x` of shape `[B, D_j]`.
    pub fn encode(&self, j: usize, x: Var<'g>) -> Result<Encoded<'g>> {
        let mc = self.check_modality(j)?;
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != mc.input_dim() {
            return Err(Error::DimMismatch {
                expected: mc.input_dim(),
                got: shape.last().copied().unwrap_or(0),
            });
        }
        let out = self.mlp("enc", j, mc.hidden.len() + 1, x)?;
        let (l, s) = (self.config.latent_dim, self.config.style());
        let gaussian = |mu_at: usize, lv_at: usize, n: usize| -> Result<GaussianVar<'g>> {
            Ok(GaussianVar {
                mu: out.slice(1, mu_at, mu_at + n)?,
                log_var: out
                    .slice(1, lv_at, lv_at + n)?
                    .clamp(LOG_VAR_MIN, LOG_VAR_MAX)?,
            })
        };
        let shared = gaussian(0, l, l)?;
        let style = if s > 0 {
            Some(gaussian(2 * l, 2 * l + s, s)?)
        } else {
            None
        };
        Ok(Encoded { shared, style })
    }

    /// Likelihood parameters for `z` of shape `[N, L]` (and style `[N, S]`).
    pub fn decode(&self, j: usize, z: Var<'g>, style: Option<Var<'g>>) -> Result<Var<'g>> {
        let mc = self.check_modality(j)?;
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.config.latent_dim {
            return Err(Error::DimMismatch {
                expected: self.config.latent_dim,
                got: shape.last().copied().unwrap_or(0),
            });
        }
        let input = match (self.config.factorized, style) {
            (true, Some(s)) => Var::concat(&[z, s], 1)?,
            (true, None) => return Err(Error::MissingStyle(j)),
            (false, _) => z,
        };
        self.mlp("dec", j, mc.hidden.len() + 1, input)
    }
}

/// Decoder output mapped to the data space: probabilities for Bernoulli and
/// categorical likelihoods, the mean for Gaussian ones.
pub fn likelihood_mean(spec: &LikelihoodSpec, params: &Tensor) -> Tensor {
    let mut out = params.clone();
    match spec.kind {
        LikelihoodKind::BernoulliLogits => {
            for v in out.data_mut() {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
        }
        LikelihoodKind::CategoricalLogits => {
            let d = spec.data_dims;
            for row in out.data_mut().chunks_mut(d) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for v in row.iter_mut() {
                    *v = (*v - m).exp() / z;
                }
            }
        }
        LikelihoodKind::GaussianFixedVar { .. } => {}
    }
    out
}
