//! Subset enumeration and product/mixture fusion of unimodal posteriors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{
    log_sum_exp, DiagonalGaussian, GaussianMixture, GaussianVar, LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::error::{Error, Result};
use crate::tensor::Var;

pub const MAX_MODALITIES: usize = 10;

/// Set of modalities as a bitmask over `m` modalities. Bit `j` is modality `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubsetMask {
    bits: u32,
    m: usize,
}

impl SubsetMask {
    pub fn new(bits: u32, m: usize) -> Result<Self> {
        check_m(m)?;
        if bits == 0 || bits >> m != 0 {
            return Err(Error::ConfigInvalid(format!(
                "subset bits {bits:#b} invalid for {m} modalities"
            )));
        }
        Ok(Self { bits, m })
    }

    pub fn from_members(members: &[usize], m: usize) -> Result<Self> {
        let mut bits = 0u32;
        for &j in members {
            if j >= m {
                return Err(Error::DimMismatch {
                    expected: m,
                    got: j + 1,
                });
            }
            bits |= 1 << j;
        }
        Self::new(bits, m)
    }

    pub fn from_present(present: &[bool]) -> Result<Self> {
        check_m(present.len())?;
        let bits = present
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .fold(0u32, |acc, (j, _)| acc | 1 << j);
        if bits == 0 {
            return Err(Error::NoModalityPresent);
        }
        Ok(Self {
            bits,
            m: present.len(),
        })
    }

    pub fn full(m: usize) -> Result<Self> {
        check_m(m)?;
        Self::new((1u32 << m) - 1, m)
    }

    pub fn singleton(j: usize, m: usize) -> Result<Self> {
        Self::from_members(&[j], m)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn num_modalities(&self) -> usize {
        self.m
    }

    pub fn contains(&self, j: usize) -> bool {
        j < self.m && self.bits & (1 << j) != 0
    }

    pub fn is_subset_of(&self, other: &SubsetMask) -> bool {
        self.bits & !other.bits == 0
    }

    pub fn len(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn members(&self) -> Vec<usize> {
        (0..self.m).filter(|&j| self.contains(j)).collect()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.m).map(|j| self.contains(j)).collect()
    }

    /// Short label such as `x0+x2`.
    pub fn label(&self) -> String {
        self.members()
            .iter()
            .map(|j| format!("x{j}"))
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Display for SubsetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 || m > MAX_MODALITIES {
        return Err(Error::MTooLarge(m));
    }
    Ok(())
}

/// Which subsets of the available modalities become mixture components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetPolicy {
    AllNonempty,
    /// One component: the product of all experts.
    FullOnly,
    /// One component per modality.
    SingletonsOnly,
    /// Member lists, e.g. `[[0], [0, 2]]`.
    Explicit(Vec<Vec<usize>>),
}

impl FromStr for SubsetPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_nonempty" => Ok(Self::AllNonempty),
            "full_only" => Ok(Self::FullOnly),
            "singletons_only" => Ok(Self::SingletonsOnly),
            other => Err(Error::ConfigInvalid(format!("unknown subset policy `{other}`"))),
        }
    }
}

pub fn enumerate_subsets(m: usize, policy: &SubsetPolicy) -> Result<Vec<SubsetMask>> {
    check_m(m)?;
    subsets_within(SubsetMask::full(m)?, policy)
}

/// Subsets selected by `policy` among the modalities in `present`, in
/// ascending bitmask order. Explicit subsets that mention an absent modality
/// are dropped.
pub fn subsets_within(present: SubsetMask, policy: &SubsetPolicy) -> Result<Vec<SubsetMask>> {
    let m = present.m;
    let mut out = match policy {
        SubsetPolicy::AllNonempty => (1..1u32 << m)
            .filter(|b| b & !present.bits == 0)
            .map(|bits| SubsetMask { bits, m })
            .collect(),
        SubsetPolicy::FullOnly => vec![present],
        SubsetPolicy::SingletonsOnly => present
            .members()
            .into_iter()
            .map(|j| SubsetMask { bits: 1 << j, m })
            .collect(),
        SubsetPolicy::Explicit(list) => {
            if list.is_empty() {
                return Err(Error::EmptyExplicitList);
            }
            let mut masks = Vec::with_capacity(list.len());
            for members in list {
                let mask = SubsetMask::from_members(members, m)?;
                if mask.is_subset_of(&present) {
                    masks.push(mask);
                }
            }
            masks.sort();
            masks.dedup();
            masks
        }
    };
    if out.is_empty() {
        return Err(Error::NoModalityPresent);
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionOptions {
    /// Add the prior `N(0, I)` as an extra mixture component for the empty subset.
    pub include_prior_component: bool,
    /// Multiply a standard-normal expert into every subset product.
    pub poe_prior_expert: bool,
    /// How the evaluation metrics combine the experts of a subset. Unset
    /// means geometric (product); the objectives always use products.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_mean: Option<AbstractMeanKind>,
}

/// Product of Gaussian experts, renormalized.
///
/// A single expert is returned unchanged. Otherwise precisions add and the
/// mean is precision-weighted; the fused log-variance is clamped like every
/// other [`DiagonalGaussian`].
pub fn poe_fuse(experts: &[DiagonalGaussian]) -> Result<DiagonalGaussian> {
    let first = experts.first().ok_or(Error::EmptyExpertList)?;
    let dim = first.dim();
    if let Some(e) = experts.iter().find(|e| e.dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            got: e.dim(),
        });
    }
    if experts.len() == 1 {
        return Ok(first.clone());
    }
    let mut precision = vec![0.0; dim];
    let mut weighted = vec![0.0; dim];
    for e in experts {
        for d in 0..dim {
            let tau = (-e.log_var()[d]).exp();
            precision[d] += tau;
            weighted[d] += tau * e.mu()[d];
        }
    }
    let mu = weighted.iter().zip(&precision).map(|(w, p)| w / p).collect();
    let log_var = precision.iter().map(|p| -p.ln()).collect();
    DiagonalGaussian::new(mu, log_var)
}

/// Batched [`poe_fuse`] on a graph. Experts share one shape `[.., L]`.
pub fn poe_fuse_var<'g>(experts: &[GaussianVar<'g>]) -> Result<GaussianVar<'g>> {
    let first = experts.first().ok_or(Error::EmptyExpertList)?;
    if experts.len() == 1 {
        return Ok(*first);
    }
    let mut precision = first.log_var.neg()?.exp()?;
    let mut weighted = precision.mul(first.mu)?;
    for e in &experts[1..] {
        let tau = e.log_var.neg()?.exp()?;
        weighted = weighted.add(tau.mul(e.mu)?)?;
        precision = precision.add(tau)?;
    }
    Ok(GaussianVar {
        mu: weighted.div(precision)?,
        log_var: precision.log()?.neg()?.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPosterior {
    /// `None` for the prior component.
    pub mask: Option<SubsetMask>,
    pub dist: DiagonalGaussian,
}

/// Uniform mixture over subset posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPosterior {
    pub subsets: Vec<SubsetPosterior>,
    pub weights: Vec<f64>,
}

impl JointPosterior {
    pub fn mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::new(
            self.subsets.iter().map(|s| s.dist.clone()).collect(),
            self.weights.clone(),
        )
    }
}

/// Mixture over the selected subsets of the present modalities. Entries of
/// `unimodal` for absent modalities are ignored and may be anything.
pub fn build_joint_posterior(
    unimodal: &[DiagonalGaussian],
    present: &[bool],
    policy: &SubsetPolicy,
    options: FusionOptions,
) -> Result<JointPosterior> {
    if unimodal.len() != present.len() {
        return Err(Error::DimMismatch {
            expected: present.len(),
            got: unimodal.len(),
        });
    }
    let present = SubsetMask::from_present(present)?;
    let masks = subsets_within(present, policy)?;
    let dim = unimodal[present.members()[0]].dim();
    let mut subsets = Vec::with_capacity(masks.len() + 1);
    if options.include_prior_component {
        subsets.push(SubsetPosterior {
            mask: None,
            dist: DiagonalGaussian::standard(dim),
        });
    }
    for mask in masks {
        subsets.push(SubsetPosterior {
            mask: Some(mask),
            dist: fuse_subset(unimodal, mask, options)?,
        });
    }
    let k = subsets.len();
    Ok(JointPosterior {
        subsets,
        weights: vec![1.0 / k as f64; k],
    })
}

/// PoE of the experts selected by `mask`.
pub fn fuse_subset(
    unimodal: &[DiagonalGaussian],
    mask: SubsetMask,
    options: FusionOptions,
) -> Result<DiagonalGaussian> {
    let mut experts: Vec<DiagonalGaussian> =
        mask.members().iter().map(|&j| unimodal[j].clone()).collect();
    if options.poe_prior_expert {
        experts.push(DiagonalGaussian::standard(experts[0].dim()));
    }
    poe_fuse(&experts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstractMeanKind {
    Arithmetic,
    Geometric,
}

impl FromStr for AbstractMeanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arithmetic" => Ok(Self::Arithmetic),
            "geometric" => Ok(Self::Geometric),
            _ => Err(Error::UnsupportedKind),
        }
    }
}

/// Density at `z` of the abstract mean of `dists` under `weights`.
///
/// Arithmetic gives the mixture. Geometric gives the renormalized product
/// `prod_k q_k^(K w_k)`, so uniform weights recover the plain product of
/// experts.
pub fn abstract_mean_density(
    kind: AbstractMeanKind,
    dists: &[DiagonalGaussian],
    weights: &[f64],
    z: &[f64],
) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::EmptyExpertList);
    }
    if dists.len() != weights.len() {
        return Err(Error::InvalidWeights(format!(
            "{} distributions but {} weights",
            dists.len(),
            weights.len()
        )));
    }
    match kind {
        AbstractMeanKind::Arithmetic => {
            Ok(GaussianMixture::new(dists.to_vec(), weights.to_vec())?.log_prob(z)?.exp())
        }
        AbstractMeanKind::Geometric => {
            let total: f64 = weights.iter().sum();
            if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() >= 1e-12 {
                return Err(Error::InvalidWeights(format!("weights sum to {total}")));
            }
            let k = dists.len() as f64;
            let dim = dists[0].dim();
            if z.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: z.len(),
                });
            }
            let mut log_density = 0.0;
            for d in 0..dim {
                let mut precision = 0.0;
                let mut weighted = 0.0;
                for (q, w) in dists.iter().zip(weights) {
                    if q.dim() != dim {
                        return Err(Error::DimMismatch {
                            expected: dim,
                            got: q.dim(),
                        });
                    }
                    let tau = k * w * (-q.log_var()[d]).exp();
                    precision += tau;
                    weighted += tau * q.mu()[d];
                }
                let mean = weighted / precision;
                log_density += 0.5 * (precision / (2.0 * std::f64::consts::PI)).ln()
                    - 0.5 * precision * (z[d] - mean).powi(2);
            }
            Ok(log_density.exp())
        }
    }
}

/// `log (1/K) sum_k q_k(z)` for one point; shorthand used by evaluation code.
pub fn uniform_mixture_log_prob(dists: &[DiagonalGaussian], z: &[f64]) -> Result<f64> {
    let mut terms = Vec::with_capacity(dists.len());
    for q in dists {
        terms.push(q.log_prob(z)?);
    }
    Ok(log_sum_exp(&terms) - (dists.len() as f64).ln())
}

/// Stacks per-subset posteriors built on a graph into `[K, ..]` tensors.
pub fn stack_components<'g>(components: &[GaussianVar<'g>]) -> Result<GaussianVar<'g>> {
    let first = components.first().ok_or(Error::EmptyExpertList)?;
    let mut shape = vec![1];
    shape.extend(first.mu.shape());
    let lift = |v: Var<'g>| v.reshape(&shape);
    let mus = components
        .iter()
        .map(|c| lift(c.mu))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let lvs = components
        .iter()
        .map(|c| lift(c.log_var))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(GaussianVar {
        mu: Var::concat(&mus, 0)?,
        log_var: Var::concat(&lvs, 0)?,
    })
}
