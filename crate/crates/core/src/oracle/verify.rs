//! Numerical checks of the multimodal bound identities on random
//! linear-Gaussian instances.
//!
//! Each instance draws a world, one observation set `X`, and a perturbed
//! family of diagonal unimodal experts. Subset posteriors are products of
//! those experts over all nonempty subsets, mixed uniformly.

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::grid::{grid_kl, GridSpec};
use super::{exact_log_marginal, exact_posterior, FullGaussian, LinearGaussianWorld};
use crate::data::MultimodalBatch;
use crate::distributions::DiagonalGaussian;
use crate::error::{Error, Result};
use crate::fusion::{enumerate_subsets, poe_fuse, uniform_mixture_log_prob, SubsetMask, SubsetPolicy};
use crate::model::{Model, ModelConfig, ParameterStore};
use crate::objectives::{elbo_graph, ObjectiveConfig, ObjectiveKind};
use crate::rng::{substream, Rng};
use crate::tensor::{Graph, Tensor};

pub const QUADRATURE_TOL: f64 = 1e-5;
pub const JENSEN_TOL: f64 = 1e-8;
pub const DENSITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub instances: usize,
    /// Instances used for the quadrature identity (the first ones).
    pub identity_instances: usize,
    pub seed: u64,
    /// Total Monte Carlo draws per instance, split evenly over components.
    pub mc_samples: usize,
    /// Flip the sign of the KL term in the bound check (fault injection).
    pub mutate_kl_sign: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            identity_instances: 20,
            seed: 0,
            mc_samples: 100_000,
            mutate_kl_sign: false,
        }
    }
}

/// Outcome of one named check. `worst_margin` is the smallest slack seen;
/// negative means the check failed on that instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub failures: Vec<usize>,
    pub worst_margin: f64,
    pub tolerance: String,
}

impl Check {
    fn new(name: &str, tolerance: &str) -> Self {
        Self {
            name: name.to_string(),
            cases: 0,
            failures: Vec::new(),
            worst_margin: f64::INFINITY,
            tolerance: tolerance.to_string(),
        }
    }

    fn record(&mut self, case: usize, margin: f64) {
        self.cases += 1;
        if margin.is_nan() || margin < 0.0 {
            self.failures.push(case);
        }
        if margin.is_nan() || margin < self.worst_margin {
            self.worst_margin = margin;
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.cases > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaReport {
    pub checks: Vec<Check>,
}

impl LemmaReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// One random world, observation, and approximate posterior family.
#[derive(Debug, Clone)]
pub struct Instance {
    pub world: LinearGaussianWorld,
    pub xs: Vec<DVector<f64>>,
    pub masks: Vec<SubsetMask>,
    pub components: Vec<DiagonalGaussian>,
    pub log_marginal: f64,
    pub posterior: FullGaussian,
}

impl Instance {
    /// Instance `index`: `d` alternates 1, 2 and `M` cycles 2, 2, 3, 3.
    pub fn generate(seed: u64, index: usize) -> Result<Self> {
        let mut rng = substream(seed, index as u64);
        let d = 1 + index % 2;
        let m = 2 + (index / 2) % 2;
        let obs: Vec<usize> = (0..m).map(|_| rng.random_range(1..=2)).collect();
        let world = LinearGaussianWorld::random(&mut rng, d, &obs);
        let (_, xs) = world.sample(&mut rng);
        let experts = perturbed_experts(&world, &xs, &mut rng, 0.3)?;
        Self::with_experts(world, xs, &experts)
    }

    pub fn with_experts(
        world: LinearGaussianWorld,
        xs: Vec<DVector<f64>>,
        experts: &[DiagonalGaussian],
    ) -> Result<Self> {
        let m = world.num_modalities();
        let masks = enumerate_subsets(m, &SubsetPolicy::AllNonempty)?;
        let components = masks
            .iter()
            .map(|mask| {
                let selected: Vec<_> = mask.members().iter().map(|&j| experts[j].clone()).collect();
                poe_fuse(&selected)
            })
            .collect::<Result<Vec<_>>>()?;
        let log_marginal = exact_log_marginal(&world, &xs)?;
        let posterior = exact_posterior(&world, &xs, world.full_mask())?;
        Ok(Self {
            world,
            xs,
            masks,
            components,
            log_marginal,
            posterior,
        })
    }

    pub fn log_joint(&self, z: &[f64]) -> f64 {
        self.world.log_joint(&self.xs, self.world.full_mask(), z)
    }

    /// Grid spanning the prior, the posterior, and every component.
    pub fn grid(&self) -> Result<GridSpec> {
        let d = self.world.latent_dim;
        let mut spans: Vec<(Vec<f64>, Vec<f64>)> = self
            .components
            .iter()
            .map(|q| (q.mu().to_vec(), q.variance().iter().map(|v| v.sqrt()).collect()))
            .collect();
        spans.push((
            self.posterior.mean.as_slice().to_vec(),
            self.posterior.cov.diagonal().iter().map(|v| v.sqrt()).collect(),
        ));
        let min_sd = spans
            .iter()
            .flat_map(|(_, sd)| sd.iter().copied())
            .fold(f64::INFINITY, f64::min);
        let provisional = GridSpec::covering(d, &spans, 10.0, 64)?;
        let width = (0..d)
            .map(|i| provisional.hi[i] - provisional.lo[i])
            .fold(0.0, f64::max);
        let points = ((width / (0.7 * min_sd)).ceil() as usize + 1).max(64);
        GridSpec::covering(d, &spans, 10.0, points)
    }
}

/// Unimodal diagonal experts centred near the exact single-modality
/// posteriors, with Gaussian jitter of scale `jitter` on mean and log-variance.
pub fn perturbed_experts(
    world: &LinearGaussianWorld,
    xs: &[DVector<f64>],
    rng: &mut Rng,
    jitter: f64,
) -> Result<Vec<DiagonalGaussian>> {
    let m = world.num_modalities();
    (0..m)
        .map(|j| {
            let exact = exact_posterior(world, xs, SubsetMask::singleton(j, m)?)?;
            let mu = exact
                .mean
                .iter()
                .map(|v| v + jitter * sample_normal(rng))
                .collect();
            let log_var = exact
                .cov
                .diagonal()
                .iter()
                .map(|v| v.ln() + jitter * sample_normal(rng))
                .collect();
            DiagonalGaussian::new(mu, log_var)
        })
        .collect()
}

fn sample_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Retries quadrature on a refined grid before giving up.
fn converged<T>(grid: &GridSpec, f: impl Fn(&GridSpec) -> Result<T>) -> Result<T> {
    let mut g = grid.clone();
    for _ in 0..2 {
        match f(&g) {
            Err(Error::GridTooCoarse { .. }) => g = g.refined(),
            other => return other,
        }
    }
    f(&g)
}

/// Right-hand side of the decomposition
/// `log p(X) = (1/K) sum_k KL(q_k || p(z|X)) + (1/K) sum_k E_{q_k}[log p(X,z) - log q_k]`.
pub fn identity_rhs(inst: &Instance) -> Result<f64> {
    let grid = inst.grid()?;
    let k = inst.components.len() as f64;
    let mut total = 0.0;
    for q in &inst.components {
        let lq = |z: &[f64]| q.log_prob(z).expect("dims");
        total += converged(&grid, |g| grid_kl(lq, |z| inst.posterior.log_prob(z), g))? / k;
        total += converged(&grid, |g| {
            g.integrate_converged(|z| {
                let l = lq(z);
                let p = l.exp();
                if p == 0.0 {
                    0.0
                } else {
                    p * (inst.log_joint(z) - l)
                }
            })
        })? / k;
    }
    Ok(total)
}

/// Monte Carlo estimates on shared stratified draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimates {
    /// Mixture-posterior ELBO `E_mix[log p(X,z) - log q_mix(z)]`.
    pub mixture: f64,
    pub mixture_se: f64,
    /// Average of per-subset ELBOs.
    pub subset_sum: f64,
    /// Mean and standard error of `mixture - subset_sum`.
    pub gap: f64,
    pub gap_se: f64,
}

pub fn bound_estimates(
    inst: &Instance,
    samples: usize,
    rng: &mut Rng,
    mutate_kl_sign: bool,
) -> BoundEstimates {
    let k = inst.components.len();
    let s = (samples / k).max(2);
    let mut mix = Stratified::default();
    let mut sum = Stratified::default();
    let mut gap = Stratified::default();
    for q in &inst.components {
        let (mut wm, mut ws, mut wg) = (Moments::default(), Moments::default(), Moments::default());
        for _ in 0..s {
            let z = q.rsample(rng);
            let log_lik = inst.world.log_likelihood(&inst.xs, inst.world.full_mask(), &z);
            let log_prior = super::standard_log_prob(&z);
            let log_mix = uniform_mixture_log_prob(&inst.components, &z).expect("dims");
            let log_q = q.log_prob(&z).expect("dims");
            let mixture_kl = log_mix - log_prior;
            let w = if mutate_kl_sign {
                log_lik + mixture_kl
            } else {
                log_lik - mixture_kl
            };
            wm.push(w);
            ws.push(log_lik + log_prior - log_q);
            wg.push(log_q - log_mix);
        }
        mix.push(wm);
        sum.push(ws);
        gap.push(wg);
    }
    BoundEstimates {
        mixture: mix.mean(),
        mixture_se: mix.se(),
        subset_sum: sum.mean(),
        gap: gap.mean(),
        gap_se: gap.se(),
    }
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn var(&self) -> f64 {
        self.m2 / (self.n - 1) as f64
    }
}

/// Equal-weight stratified estimator over components.
#[derive(Default)]
struct Stratified {
    strata: Vec<Moments>,
}

impl Stratified {
    fn push(&mut self, m: Moments) {
        self.strata.push(m);
    }

    fn mean(&self) -> f64 {
        self.strata.iter().map(|m| m.mean).sum::<f64>() / self.strata.len() as f64
    }

    fn se(&self) -> f64 {
        let k = self.strata.len() as f64;
        self.strata
            .iter()
            .map(|m| m.var() / m.n as f64)
            .sum::<f64>()
            .sqrt()
            / k
    }
}

/// Grid values of `E_mix[log mix]` and `(1/K) sum_k E_{q_k}[log q_k]`.
pub fn jensen_terms(inst: &Instance) -> Result<(f64, f64)> {
    let grid = inst.grid()?;
    let mixture = converged(&grid, |g| {
        g.integrate_converged(|z| {
            let l = uniform_mixture_log_prob(&inst.components, z).expect("dims");
            let p = l.exp();
            if p == 0.0 {
                0.0
            } else {
                p * l
            }
        })
    })?;
    let k = inst.components.len() as f64;
    let mut average = 0.0;
    for q in &inst.components {
        // closed-form negative entropy of a diagonal Gaussian
        average += -0.5
            * q.log_var()
                .iter()
                .map(|lv| 1.0 + lv + (2.0 * std::f64::consts::PI).ln())
                .sum::<f64>()
            / k;
    }
    Ok((mixture, average))
}

/// Identity, bound, ordering, and Jensen checks over random instances.
pub fn verify_lemmas(config: &VerifyConfig) -> Result<LemmaReport> {
    let mut identity = Check::new("decomposition_identity", "|diff| < 1e-5 (quadrature)");
    let mut bound = Check::new("elbo_bound", "elbo <= log p(X) + 3 SE");
    let mut ordering = Check::new("mixture_ordering", "mixture >= subset_sum - 3 SE");
    let mut jensen = Check::new("jensen_step", "E_mix[log mix] <= avg E_k[log q_k] + 1e-8");
    for i in 0..config.instances {
        let inst = Instance::generate(config.seed, i)?;
        if i < config.identity_instances {
            let rhs = identity_rhs(&inst)?;
            identity.record(i, QUADRATURE_TOL - (inst.log_marginal - rhs).abs());
        }
        let mut rng = substream(config.seed ^ 0x5eed, i as u64);
        let est = bound_estimates(&inst, config.mc_samples, &mut rng, config.mutate_kl_sign);
        bound.record(i, inst.log_marginal + 3.0 * est.mixture_se - est.mixture);
        ordering.record(i, est.gap + 3.0 * est.gap_se);
        let (mix, avg) = jensen_terms(&inst)?;
        jensen.record(i, avg + JENSEN_TOL - mix);
    }
    Ok(LemmaReport {
        checks: vec![identity, bound, ordering, jensen],
    })
}

/// Fused densities against pointwise products renormalized on a 1D grid.
pub fn poe_grid_check(cases: usize, seed: u64) -> Result<Check> {
    let mut check = Check::new("poe_vs_grid", "max density error < 1e-6");
    for i in 0..cases {
        let mut rng = substream(seed, 10_000 + i as u64);
        let n = rng.random_range(2..=3);
        let experts: Vec<DiagonalGaussian> = (0..n)
            .map(|_| {
                DiagonalGaussian::new(
                    vec![rng.random_range(-3.0..3.0)],
                    vec![rng.random_range(-1.5..1.5)],
                )
            })
            .collect::<Result<_>>()?;
        let fused = poe_fuse(&experts)?;
        let grid = GridSpec::symmetric(1, 12.0, 4001)?;
        let log_prod = |z: &[f64]| -> f64 { experts.iter().map(|e| e.log_prob(z).expect("dims")).sum() };
        let norm = grid.integrate_converged(|z| log_prod(z).exp())?;
        let (lo, h) = (grid.lo[0], (grid.hi[0] - grid.lo[0]) / (grid.points[0] - 1) as f64);
        let max_err = (0..grid.points[0])
            .map(|p| {
                let z = [lo + p as f64 * h];
                (log_prod(&z).exp() / norm - fused.log_prob(&z).expect("dims").exp()).abs()
            })
            .fold(0.0, f64::max);
        check.record(i, DENSITY_TOL - max_err);
    }
    Ok(check)
}

/// Closed-form KL to the prior against quadrature, and nonnegativity.
pub fn kl_grid_check(cases: usize, seed: u64) -> Result<Check> {
    let mut check = Check::new("kl_vs_grid", "|closed - grid| < 1e-6 and KL >= 0");
    let prior = DiagonalGaussian::standard(1);
    for i in 0..cases {
        let mut rng = substream(seed, 20_000 + i as u64);
        let q = DiagonalGaussian::new(
            vec![rng.random_range(-3.0..3.0)],
            vec![rng.random_range(-2.0..2.0)],
        )?;
        let sd = q.variance()[0].sqrt();
        let grid = GridSpec::covering(1, &[(q.mu().to_vec(), vec![sd])], 14.0, 4001)?;
        let numeric = grid_kl(
            |z| q.log_prob(z).expect("dims"),
            |z| prior.log_prob(z).expect("dims"),
            &grid,
        )?;
        let closed = q.kl_to_standard_normal();
        check.record(i, (DENSITY_TOL - (closed - numeric).abs()).min(closed));
    }
    Ok(check)
}

/// Bit equality of values and gradients for the special-case reductions:
/// mopoe(full_only) vs poe and mopoe(singletons_only) vs moe.
pub fn reduction_check(cases: usize, seed: u64) -> Result<Check> {
    let mut check = Check::new("special_case_reductions", "bit-identical values and gradients");
    for i in 0..cases {
        let mut rng = substream(seed, 30_000 + i as u64);
        let m = rng.random_range(1..=3);
        let dims: Vec<usize> = (0..m).map(|_| rng.random_range(1..=4)).collect();
        let config = ModelConfig::bernoulli(&dims, rng.random_range(1..=3), &[rng.random_range(2..=5)]);
        let params = ParameterStore::init(&config, rng.random())?;
        let rows = rng.random_range(1..=4);
        let data = dims
            .iter()
            .map(|&d| {
                let v = (0..rows * d).map(|_| f64::from(rng.random_bool(0.5))).collect();
                Tensor::matrix(rows, d, v).map(Some)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let batch = MultimodalBatch::new(data, None)?;
        let noise_seed: u64 = rng.random();
        let cfg = ObjectiveConfig::default().with_samples(rng.random_range(1..=3));
        let equal = |a: (ObjectiveKind, SubsetPolicy), b: ObjectiveKind| -> Result<bool> {
            let lhs = value_and_grads(&config, &params, &batch, a.0, &cfg.clone().with_policy(a.1), noise_seed)?;
            let rhs = value_and_grads(&config, &params, &batch, b, &cfg, noise_seed)?;
            Ok(bits(&lhs) == bits(&rhs))
        };
        let ok = equal((ObjectiveKind::Mopoe, SubsetPolicy::FullOnly), ObjectiveKind::Poe)?
            && equal((ObjectiveKind::Mopoe, SubsetPolicy::SingletonsOnly), ObjectiveKind::Moe)?;
        check.record(i, if ok { 0.0 } else { -1.0 });
    }
    Ok(check)
}

/// Objective value followed by every gradient entry in parameter order.
pub fn value_and_grads(
    config: &ModelConfig,
    params: &ParameterStore,
    batch: &MultimodalBatch,
    kind: ObjectiveKind,
    cfg: &ObjectiveConfig,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    let graph = Graph::new();
    let model = Model::bind(config, params, &graph, true);
    let mut rng = crate::rng::seeded(noise_seed);
    let out = elbo_graph(&graph, &model, batch, kind, cfg, &mut rng)?;
    let grads = graph.backward(out.total)?;
    let mut values = vec![out.total.item()];
    for var in model.vars.values() {
        values.extend_from_slice(grads.get(*var).expect("leaf").data());
    }
    Ok(values)
}

fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}

/// Every check, as printed by the `verify` command.
pub fn verify_all(config: &VerifyConfig) -> Result<LemmaReport> {
    let mut report = verify_lemmas(config)?;
    report.checks.push(poe_grid_check(100, config.seed)?);
    report.checks.push(kl_grid_check(100, config.seed)?);
    report.checks.push(reduction_check(20, config.seed)?);
    Ok(report)
}
