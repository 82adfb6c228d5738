//! Multimodal ELBOs built on one code path.
//!
//! Every objective is the same computation: encode the present modalities,
//! fuse each selected subset by product of experts, draw reparameterized
//! samples from every component, reconstruct all present modalities from
//! each sample, and subtract `beta` times a KL term. The named objectives
//! only pick the subset policy:
//!
//! | objective    | components                         |
//! |--------------|------------------------------------|
//! | `unimodal j` | `{x_j}`                            |
//! | `poe`        | the full present set               |
//! | `moe`        | each present modality alone        |
//! | `mopoe`      | per [`ObjectiveConfig::subset_policy`] |
//! | `subset_sum` | as `mopoe`, closed-form KL per subset |
//! | `factorized` | as `mopoe`, plus per-modality style latents |
//!
//! so the special cases agree bit for bit with the general one.

mod train;

pub use train::{evaluate, train_epoch, train_step, EpochMetrics};

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::MultimodalBatch;
use crate::distributions::{recon_log_prob_var, standard_normal_log_prob_var, GaussianVar};
use crate::error::{Error, Result};
use crate::fusion::{poe_fuse_var, stack_components, subsets_within, FusionOptions, SubsetMask, SubsetPolicy};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Unimodal(usize),
    Poe,
    Moe,
    Mopoe,
    SubsetSum,
    Factorized,
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unimodal(j) => write!(f, "unimodal:{j}"),
            Self::Poe => f.write_str("poe"),
            Self::Moe => f.write_str("moe"),
            Self::Mopoe => f.write_str("mopoe"),
            Self::SubsetSum => f.write_str("subset_sum"),
            Self::Factorized => f.write_str("factorized"),
        }
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    /// Accepts the names above; `unimodal` takes an optional `:j` suffix.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "poe" => Self::Poe,
            "moe" => Self::Moe,
            "mopoe" => Self::Mopoe,
            "subset_sum" => Self::SubsetSum,
            "factorized" => Self::Factorized,
            "unimodal" => Self::Unimodal(0),
            other => match other.strip_prefix("unimodal:").map(str::parse) {
                Some(Ok(j)) => Self::Unimodal(j),
                _ => return Err(Error::ConfigInvalid(format!("unknown objective `{other}`"))),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// `(1/K) sum_k KL(q_k || p)`, closed form.
    AvgSubsetKl,
    /// `(1/K) sum_k E_{q_k}[log q_mix(z) - log p(z)]` on the reconstruction samples.
    MixtureMc,
}

impl fmt::Display for KlEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AvgSubsetKl => "avg_subset_kl",
            Self::MixtureMc => "mixture_mc",
        })
    }
}

impl FromStr for KlEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg_subset_kl" => Ok(Self::AvgSubsetKl),
            "mixture_mc" => Ok(Self::MixtureMc),
            other => Err(Error::ConfigInvalid(format!("unknown kl estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub subset_policy: SubsetPolicy,
    pub beta: f64,
    pub kl_estimator: KlEstimator,
    pub samples_per_component: usize,
    pub factorized: bool,
    pub fusion: FusionOptions,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            subset_policy: SubsetPolicy::AllNonempty,
            beta: 1.0,
            kl_estimator: KlEstimator::AvgSubsetKl,
            samples_per_component: 1,
            factorized: false,
            fusion: FusionOptions::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples_per_component = samples;
        self
    }

    pub fn with_estimator(mut self, estimator: KlEstimator) -> Self {
        self.kl_estimator = estimator;
        self
    }

    pub fn with_policy(mut self, policy: SubsetPolicy) -> Self {
        self.subset_policy = policy;
        self
    }

    /// `beta` may be zero (pure reconstruction) but not negative.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "beta must be finite and nonnegative, got {}",
                self.beta
            )));
        }
        if self.samples_per_component == 0 {
            return Err(Error::ConfigInvalid(
                "samples_per_component must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconTerm {
    pub subset: String,
    pub modality: usize,
    pub value: f64,
}

/// Batch-averaged breakdown of one objective evaluation.
///
/// Reconstruction terms are already divided by the component count, so
/// `total == sum(recon) - beta * kl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub total: f64,
    pub recon: Vec<ReconTerm>,
    pub kl: f64,
    /// Closed-form `KL(q_k || p)` per component.
    pub component_kl: Vec<f64>,
    pub beta: f64,
    pub subsets: Vec<String>,
    pub estimator: KlEstimator,
    /// Standard error of `total` over the per-component samples (needs at least two).
    pub se: Option<f64>,
}

impl ElboReport {
    pub fn recon_total(&self) -> f64 {
        self.recon.iter().map(|r| r.value).sum()
    }
}

/// The differentiable objective and its intermediates.
pub struct ElboGraph<'g> {
    /// Batch mean of the objective (to be maximized).
    pub total: Var<'g>,
    /// Objective per batch row, `[B]`.
    pub per_sample: Var<'g>,
    /// Component posteriors stacked to `[K, B, L]`.
    pub components: GaussianVar<'g>,
    /// Reparameterized samples `[K, S, B, L]`.
    pub z: Var<'g>,
    pub report: ElboReport,
}

const PRIOR_LABEL: &str = "prior";

/// Builds the objective graph for `kind` on `batch`.
///
/// Only modalities present in `batch` are read. Noise is drawn from `rng` in
/// a fixed order: shared latent `[K, S, B, L]`, then one `[S, B, style]`
/// block per present modality for factorized models.
pub fn elbo_graph<'g>(
    graph: &'g Graph,
    model: &Model<'_, 'g>,
    batch: &MultimodalBatch,
    kind: ObjectiveKind,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<ElboGraph<'g>> {
    cfg.validate()?;
    let mc = model.config;
    let m = mc.num_modalities();
    if batch.num_modalities() != m {
        return Err(Error::DimMismatch {
            expected: m,
            got: batch.num_modalities(),
        });
    }
    let available = batch.present_mask()?;
    let (present, policy, closed_kl) = match kind {
        ObjectiveKind::Unimodal(j) => {
            if !batch.is_present(j) {
                return Err(Error::NoModalityPresent);
            }
            (SubsetMask::singleton(j, m)?, SubsetPolicy::FullOnly, true)
        }
        ObjectiveKind::Poe => (available, SubsetPolicy::FullOnly, false),
        ObjectiveKind::Moe => (available, SubsetPolicy::SingletonsOnly, false),
        ObjectiveKind::Mopoe => (available, cfg.subset_policy.clone(), false),
        ObjectiveKind::SubsetSum => (available, cfg.subset_policy.clone(), true),
        ObjectiveKind::Factorized => {
            if !mc.factorized {
                return Err(Error::ConfigInvalid(
                    "factorized objective needs a factorized model".into(),
                ));
            }
            (available, cfg.subset_policy.clone(), false)
        }
    };
    let estimator = if closed_kl {
        KlEstimator::AvgSubsetKl
    } else {
        cfg.kl_estimator
    };
    let masks = subsets_within(present, &policy)?;
    let members = present.members();
    let (b, l, s) = (batch.batch_size(), mc.latent_dim, cfg.samples_per_component);

    let mut xs = vec![None; m];
    let mut encoded = vec![None; m];
    for &j in &members {
        let x = graph.constant(batch.observed(j).expect("present modality").clone());
        encoded[j] = Some(model.encode(j, x)?);
        xs[j] = Some(x);
    }

    let mut components = Vec::with_capacity(masks.len() + 1);
    let mut labels = Vec::with_capacity(masks.len() + 1);
    if cfg.fusion.include_prior_component {
        components.push(GaussianVar::standard(graph, &[b, l]));
        labels.push(PRIOR_LABEL.to_string());
    }
    for mask in &masks {
        let mut experts: Vec<GaussianVar<'g>> = mask
            .members()
            .iter()
            .map(|&j| encoded[j].expect("encoded").shared)
            .collect();
        if cfg.fusion.poe_prior_expert {
            experts.push(GaussianVar::standard(graph, &[b, l]));
        }
        components.push(poe_fuse_var(&experts)?);
        labels.push(mask.label());
    }
    let k = components.len();
    let stacked = stack_components(&components)?;

    let eps = graph.constant(standard_normal(rng, vec![k, s, b, l])?);
    let lifted = GaussianVar {
        mu: stacked.mu.reshape(&[k, 1, b, l])?,
        log_var: stacked.log_var.reshape(&[k, 1, b, l])?,
    };
    let z = lifted.rsample_with(eps)?;
    let rows = k * s * b;
    let z_flat = z.reshape(&[rows, l])?;

    let mut styles = vec![None; m];
    let mut style_kl: Option<Var<'g>> = None;
    if mc.factorized {
        let sd = mc.style_dim;
        for &j in &members {
            let q = encoded[j].expect("encoded").style.ok_or(Error::MissingStyle(j))?;
            let eps = graph.constant(standard_normal(rng, vec![s, b, sd])?);
            let sample = GaussianVar {
                mu: q.mu.reshape(&[1, b, sd])?,
                log_var: q.log_var.reshape(&[1, b, sd])?,
            }
            .rsample_with(eps)?;
            styles[j] = Some(
                sample
                    .reshape(&[1, s, b, sd])?
                    .broadcast(&[k, s, b, sd])?
                    .reshape(&[rows, sd])?,
            );
            let kl = q.kl_to_standard_normal()?;
            style_kl = Some(match style_kl {
                None => kl,
                Some(acc) => acc.add(kl)?,
            });
        }
    }

    let mut recon: Option<Var<'g>> = None;
    let mut recon_terms = Vec::with_capacity(k * members.len());
    let mut per_modality = Vec::with_capacity(members.len());
    for &j in &members {
        let spec = &mc.modalities[j].likelihood;
        let params = model.decode(j, z_flat, styles[j])?;
        let d = spec.data_dims;
        let lp = recon_log_prob_var(spec, params.reshape(&[k, s, b, d])?, xs[j].expect("x"))?;
        per_modality.push((j, lp.value()));
        recon = Some(match recon {
            None => lp,
            Some(acc) => acc.add(lp)?,
        });
    }
    let recon = recon.expect("at least one modality");
    for (ki, label) in labels.iter().enumerate() {
        for (j, lp) in &per_modality {
            let block = &lp.data()[ki * s * b..(ki + 1) * s * b];
            recon_terms.push(ReconTerm {
                subset: label.clone(),
                modality: *j,
                value: block.iter().sum::<f64>() / (s * b * k) as f64,
            });
        }
    }

    let component_kl = stacked.kl_to_standard_normal()?;
    let kl = match estimator {
        KlEstimator::AvgSubsetKl => component_kl.reshape(&[k, 1, b])?,
        KlEstimator::MixtureMc => {
            let pairwise = GaussianVar {
                mu: stacked.mu.reshape(&[1, 1, k, b, l])?,
                log_var: stacked.log_var.reshape(&[1, 1, k, b, l])?,
            }
            .log_prob(z.reshape(&[k, s, 1, b, l])?)?;
            let log_mix = pairwise.logsumexp(2)?.shift(-(k as f64).ln())?;
            log_mix.sub(standard_normal_log_prob_var(z)?)?
        }
    };

    let per_draw = recon.sub(kl.scale(cfg.beta)?)?;
    let mut per_sample = per_draw.mean_axis(1)?.mean_axis(0)?;
    if let Some(skl) = style_kl {
        per_sample = per_sample.sub(skl.scale(cfg.beta)?)?;
    }
    let total = per_sample.mean()?;

    let kl_value = {
        let kl_mean = kl.value().data().iter().sum::<f64>() / kl.value().numel() as f64;
        kl_mean + style_kl.map_or(0.0, |v| v.value().data().iter().sum::<f64>() / b as f64)
    };
    let component_kl_value = component_kl
        .value()
        .data()
        .chunks(b)
        .map(|c| c.iter().sum::<f64>() / b as f64)
        .collect();
    let se = stratified_se(&per_draw.value(), style_kl.map(|v| v.value()), cfg.beta, k, s, b);

    let report = ElboReport {
        total: total.item(),
        recon: recon_terms,
        kl: kl_value,
        component_kl: component_kl_value,
        beta: cfg.beta,
        subsets: labels,
        estimator,
        se,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "total".into(),
        });
    }
    Ok(ElboGraph {
        total,
        per_sample,
        components: stacked,
        z,
        report,
    })
}

/// Standard error of the batch-mean objective treating the `S` stratified
/// draws of each row as independent replicates.
fn stratified_se(
    per_draw: &Tensor,
    style_kl: Option<Tensor>,
    beta: f64,
    k: usize,
    s: usize,
    b: usize,
) -> Option<f64> {
    if s < 2 {
        return None;
    }
    let d = per_draw.data();
    let mut var_sum = 0.0;
    for bi in 0..b {
        let offset = style_kl.as_ref().map_or(0.0, |t| beta * t.data()[bi]);
        let g: Vec<f64> = (0..s)
            .map(|si| (0..k).map(|ki| d[(ki * s + si) * b + bi]).sum::<f64>() / k as f64 - offset)
            .collect();
        let mean = g.iter().sum::<f64>() / s as f64;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
        var_sum += var / s as f64;
    }
    Some(var_sum.sqrt() / b as f64)
}

fn standard_normal(rng: &mut Rng, shape: Vec<usize>) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Evaluates `kind` without recording gradients.
pub fn elbo(
    config: &crate::model::ModelConfig,
    params: &crate::model::ParameterStore,
    batch: &MultimodalBatch,
    kind: ObjectiveKind,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<ElboReport> {
    let graph = Graph::new();
    let model = Model::bind(config, params, &graph, false);
    Ok(elbo_graph(&graph, &model, batch, kind, cfg, rng)?.report)
}

macro_rules! named_objective {
    ($(#[$doc:meta])* $name:ident, $kind:expr) => {
        $(#[$doc])*
        pub fn $name(
            config: &crate::model::ModelConfig,
            params: &crate::model::ParameterStore,
            batch: &MultimodalBatch,
            cfg: &ObjectiveConfig,
            rng: &mut Rng,
        ) -> Result<ElboReport> {
            elbo(config, params, batch, $kind, cfg, rng)
        }
    };
}

named_objective!(
    /// Product-of-experts posterior over all present modalities.
    elbo_poe,
    ObjectiveKind::Poe
);
named_objective!(
    /// Uniform mixture of the unimodal posteriors.
    elbo_moe,
    ObjectiveKind::Moe
);
named_objective!(
    /// Mixture of subset products under the configured policy.
    elbo_mopoe,
    ObjectiveKind::Mopoe
);
named_objective!(
    /// Average of complete per-subset ELBOs.
    elbo_subset_sum,
    ObjectiveKind::SubsetSum
);
named_objective!(
    /// Shared mixture latent plus per-modality style latents.
    elbo_factorized,
    ObjectiveKind::Factorized
);

pub fn elbo_unimodal(
    config: &crate::model::ModelConfig,
    params: &crate::model::ParameterStore,
    j: usize,
    batch: &MultimodalBatch,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<ElboReport> {
    elbo(config, params, batch, ObjectiveKind::Unimodal(j), cfg, rng)
}
