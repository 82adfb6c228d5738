//! Synthetic data and the evaluation metrics: latent linear probe,
//! generation coherence, and importance-weighted log-likelihood.
//!
//! Metrics split the test set into fixed chunks of [`EVAL_CHUNK`] rows and
//! draw chunk `c` from substream `c` of the evaluation seed, so a partitioned
//! run reproduces a serial one exactly.

pub mod classifier;
pub mod coherence;
pub mod dataset;
pub mod io;
pub mod iwae;
pub mod probe;
mod report;

pub use classifier::{
    train_coherence_classifiers, Classifier, ClassifierTrainConfig, MlpClassifier,
    COHERENCE_THRESHOLD,
};
pub use coherence::{coherence, conditional_coherence, joint_coherence, CoherenceMode};
pub use dataset::{generate_dataset, ModalityStyle, SyntheticSetConfig};
pub use iwae::{importance_log_likelihood, iwae_log_likelihood, Proposal, DEFAULT_IMPORTANCE_SAMPLES};
pub use probe::{linear_probe, posterior_means, LogisticProbe};
pub use report::{evaluate_model, CoherenceEntry, EvalConfig, EvalReport, SubsetMetric};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::data::MultimodalBatch;
use crate::distributions::GaussianVar;
use crate::error::Result;
use crate::fusion::{poe_fuse_var, AbstractMeanKind, FusionOptions, SubsetMask};
use crate::model::{Encoded, Model};
use crate::rng::{substream, Rng};
use crate::tensor::{Graph, Tensor, Var};

pub const EVAL_CHUNK: usize = 250;

/// Row ranges of `n` in evaluation chunks, each with its own stream.
pub(crate) fn chunks(n: usize, seed: u64) -> impl Iterator<Item = (Vec<usize>, Rng)> {
    (0..n.div_ceil(EVAL_CHUNK)).map(move |c| {
        let rows = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n)).collect();
        (rows, substream(seed, c as u64))
    })
}

/// Encodes the modalities of `batch` that `mask` selects (all when `None`).
pub(crate) fn encode_batch<'g>(
    graph: &'g Graph,
    model: &Model<'_, 'g>,
    batch: &MultimodalBatch,
    mask: Option<SubsetMask>,
) -> Result<Vec<Option<Encoded<'g>>>> {
    (0..batch.num_modalities())
        .map(|j| {
            if mask.is_some_and(|m| !m.contains(j)) {
                return Ok(None);
            }
            match batch.observed(j) {
                Some(x) => model.encode(j, graph.constant(x.clone())).map(Some),
                None => Ok(None),
            }
        })
        .collect()
}

/// Posterior of the modalities in a subset, `[B, L]` per row.
pub(crate) enum SubsetPosterior<'g> {
    /// Geometric mean: the product of the member experts.
    Product(GaussianVar<'g>),
    /// Arithmetic mean: the uniform mixture of the member experts.
    Mixture(Vec<GaussianVar<'g>>),
}

impl<'g> SubsetPosterior<'g> {
    /// Posterior mean, `[B, L]`.
    pub(crate) fn mean(&self) -> Result<Tensor> {
        match self {
            Self::Product(q) => Ok(q.mu.value()),
            Self::Mixture(qs) => {
                let mut mean = qs[0].mu.value();
                for q in &qs[1..] {
                    for (a, b) in mean.data_mut().iter_mut().zip(q.mu.value().data()) {
                        *a += b;
                    }
                }
                let k = qs.len() as f64;
                mean.data_mut().iter_mut().for_each(|v| *v /= k);
                Ok(mean)
            }
        }
    }

    /// Draws `z` with shape `lead ++ [B, L]`. Standard normal noise comes
    /// first; mixtures then pick one component per row.
    pub(crate) fn sample(&self, graph: &'g Graph, lead: &[usize], rng: &mut Rng) -> Result<Var<'g>> {
        let q0 = match self {
            Self::Product(q) => q,
            Self::Mixture(qs) => &qs[0],
        };
        let base = q0.mu.shape();
        let mut shape = lead.to_vec();
        shape.extend_from_slice(&base);
        let n: usize = shape.iter().product();
        let eps = Tensor::new(shape.clone(), (0..n).map(|_| StandardNormal.sample(rng)).collect())?;
        match self {
            Self::Product(q) => Ok(q.rsample_with(graph.constant(eps))?),
            Self::Mixture(qs) => {
                let (mus, lvs): (Vec<Tensor>, Vec<Tensor>) =
                    qs.iter().map(|q| (q.mu.value(), q.log_var.value())).unzip();
                let (rows, l) = (base[0], base[1]);
                let mut z = eps.data().to_vec();
                for (i, chunk) in z.chunks_mut(l).enumerate() {
                    let k = rng.random_range(0..qs.len());
                    let r = i % rows;
                    let (mu, lv) = (&mus[k].data()[r * l..], &lvs[k].data()[r * l..]);
                    for (d, v) in chunk.iter_mut().enumerate() {
                        *v = mu[d] + (0.5 * lv[d]).exp() * *v;
                    }
                }
                Ok(graph.constant(Tensor::new(shape, z)?))
            }
        }
    }

    /// Log-density of `z`, summed over the latent axis.
    pub(crate) fn log_prob(&self, z: Var<'g>) -> Result<Var<'g>> {
        match self {
            Self::Product(q) => q.log_prob(z),
            Self::Mixture(qs) => {
                let per: Vec<Var<'g>> = qs.iter().map(|q| q.log_prob(z)).collect::<Result<_>>()?;
                let shape = per[0].shape();
                let n: usize = shape.iter().product();
                let flat: Vec<Var<'g>> = per.iter().map(|v| v.reshape(&[1, n])).collect::<std::result::Result<_, _>>()?;
                let stacked = Var::concat(&flat, 0)?;
                Ok(stacked.logsumexp(0)?.shift(-(qs.len() as f64).ln())?.reshape(&shape)?)
            }
        }
    }
}

/// Posterior of the modalities in `mask` under the evaluation abstract
/// mean. The prior expert option only applies to products.
pub(crate) fn subset_posterior<'g>(
    graph: &'g Graph,
    encoded: &[Option<Encoded<'g>>],
    mask: SubsetMask,
    fusion: &FusionOptions,
    rows: usize,
    latent: usize,
) -> Result<SubsetPosterior<'g>> {
    let mut experts = Vec::with_capacity(mask.len() + 1);
    for j in mask.members() {
        let e = encoded[j].ok_or(crate::error::Error::NoModalityPresent)?;
        experts.push(e.shared);
    }
    if fusion.eval_mean == Some(AbstractMeanKind::Arithmetic) {
        return Ok(SubsetPosterior::Mixture(experts));
    }
    if fusion.poe_prior_expert {
        experts.push(GaussianVar::standard(graph, &[rows, latent]));
    }
    Ok(SubsetPosterior::Product(poe_fuse_var(&experts)?))
}
