//! Exact linear-Gaussian multimodal world used as ground truth.
//!
//! `z ~ N(0, I_d)` and `x_j | z ~ N(A_j z, rho_j I)`. Posteriors and marginal
//! likelihoods are available in closed form; [`grid`] adds trapezoidal
//! quadrature for `d <= 2` and [`verify`] checks the bound identities.

pub mod grid;
pub mod verify;

pub use grid::{grid_kl, GridSpec};
pub use verify::{verify_lemmas, Check, LemmaReport, VerifyConfig};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::distributions::{DiagonalGaussian, HALF_LOG_2PI};
use crate::error::{Error, Result};
use crate::fusion::SubsetMask;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModality {
    /// `obs_dims x d`.
    pub loading: DMatrix<f64>,
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianWorld {
    pub latent_dim: usize,
    pub modalities: Vec<LinearModality>,
}

impl LinearGaussianWorld {
    pub fn new(latent_dim: usize, modalities: Vec<LinearModality>) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::ConfigInvalid("latent dimension must be positive".into()));
        }
        for (j, m) in modalities.iter().enumerate() {
            if m.loading.ncols() != latent_dim {
                return Err(Error::DimMismatch {
                    expected: latent_dim,
                    got: m.loading.ncols(),
                });
            }
            if !(m.noise_var > 0.0) || !m.loading.iter().all(|v| v.is_finite()) {
                return Err(Error::ConfigInvalid(format!(
                    "modality {j} needs positive noise and finite loadings"
                )));
            }
        }
        if modalities.is_empty() {
            return Err(Error::MTooLarge(0));
        }
        Ok(Self {
            latent_dim,
            modalities,
        })
    }

    /// Gaussian loadings and noise variances uniform in `[0.3, 2)`.
    pub fn random(rng: &mut Rng, latent_dim: usize, obs_dims: &[usize]) -> Self {
        let modalities = obs_dims
            .iter()
            .map(|&o| LinearModality {
                loading: DMatrix::from_fn(o, latent_dim, |_, _| StandardNormal.sample(rng)),
                noise_var: rng.random_range(0.3..2.0),
            })
            .collect();
        Self {
            latent_dim,
            modalities,
        }
    }

    /// Diagonal loadings (`obs_dims == d`) bounded away from zero.
    pub fn random_diagonal(rng: &mut Rng, latent_dim: usize, m: usize) -> Self {
        let modalities = (0..m)
            .map(|_| {
                let diag = DVector::from_fn(latent_dim, |_, _| {
                    let v: f64 = rng.random_range(0.5..2.0);
                    if rng.random_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                });
                LinearModality {
                    loading: DMatrix::from_diagonal(&diag),
                    noise_var: rng.random_range(0.3..2.0),
                }
            })
            .collect();
        Self {
            latent_dim,
            modalities,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn obs_dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.loading.nrows()).collect()
    }

    /// Draws `(z, X)` from the generative process.
    pub fn sample(&self, rng: &mut Rng) -> (DVector<f64>, Vec<DVector<f64>>) {
        let z = DVector::from_fn(self.latent_dim, |_, _| StandardNormal.sample(rng));
        let xs = self
            .modalities
            .iter()
            .map(|m| {
                let noise = DVector::from_fn(m.loading.nrows(), |_, _| {
                    let e: f64 = StandardNormal.sample(rng);
                    m.noise_var.sqrt() * e
                });
                &m.loading * &z + noise
            })
            .collect();
        (z, xs)
    }

    /// `sum_{j in subset} log N(x_j; A_j z, rho_j I)`.
    pub fn log_likelihood(&self, xs: &[DVector<f64>], subset: SubsetMask, z: &[f64]) -> f64 {
        let z = DVector::from_column_slice(z);
        subset
            .members()
            .iter()
            .map(|&j| {
                let m = &self.modalities[j];
                let r = &xs[j] - &m.loading * &z;
                let n = r.len() as f64;
                -n * HALF_LOG_2PI - 0.5 * n * m.noise_var.ln() - r.norm_squared() / (2.0 * m.noise_var)
            })
            .sum()
    }

    /// `log p(X_subset | z) + log p(z)`.
    pub fn log_joint(&self, xs: &[DVector<f64>], subset: SubsetMask, z: &[f64]) -> f64 {
        self.log_likelihood(xs, subset, z) + standard_log_prob(z)
    }

    pub fn full_mask(&self) -> SubsetMask {
        SubsetMask::full(self.num_modalities()).expect("validated modality count")
    }

    /// Gaussian factor proportional to `p(x_j | z)` as a function of `z`,
    /// for diagonal loadings with nonzero entries.
    pub fn likelihood_expert(&self, xs: &[DVector<f64>], j: usize) -> Result<DiagonalGaussian> {
        let m = &self.modalities[j];
        let a = &m.loading;
        if a.nrows() != a.ncols() || !a.is_square() {
            return Err(Error::ConfigInvalid("likelihood experts need diagonal loadings".into()));
        }
        let mut mu = Vec::with_capacity(self.latent_dim);
        let mut log_var = Vec::with_capacity(self.latent_dim);
        for i in 0..self.latent_dim {
            let aii = a[(i, i)];
            let off_diagonal = (0..self.latent_dim).any(|k| k != i && a[(i, k)] != 0.0);
            if aii == 0.0 || off_diagonal {
                return Err(Error::ConfigInvalid("likelihood experts need diagonal loadings".into()));
            }
            mu.push(xs[j][i] / aii);
            log_var.push((m.noise_var / (aii * aii)).ln());
        }
        DiagonalGaussian::new(mu, log_var)
    }
}

/// `log N(z; 0, I)`.
pub fn standard_log_prob(z: &[f64]) -> f64 {
    z.iter().map(|v| -HALF_LOG_2PI - 0.5 * v * v).sum()
}

/// Full-covariance Gaussian, used only for exact posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl FullGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let chol = cov.clone().cholesky().ok_or(Error::SingularPrecision)?.l();
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, z: &[f64]) -> f64 {
        let r = DVector::from_column_slice(z) - &self.mean;
        let y = self
            .chol
            .solve_lower_triangular(&r)
            .expect("cholesky factor is nonsingular");
        -(self.dim() as f64) * HALF_LOG_2PI - 0.5 * self.log_det - 0.5 * y.norm_squared()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let eps = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        (&self.mean + &self.chol * eps).as_slice().to_vec()
    }

    /// The diagonal part, for comparisons in worlds where it is exact.
    pub fn to_diagonal(&self) -> Result<DiagonalGaussian> {
        DiagonalGaussian::new(
            self.mean.as_slice().to_vec(),
            self.cov.diagonal().iter().map(|v| v.ln()).collect(),
        )
    }

    pub fn kl_to_standard_normal(&self) -> f64 {
        let d = self.dim() as f64;
        0.5 * (self.cov.trace() + self.mean.norm_squared() - d - self.log_det)
    }
}

/// `p(z | X_subset)`: precision `I + sum A_j^T A_j / rho_j`, mean
/// `Lambda^{-1} sum A_j^T x_j / rho_j`.
pub fn exact_posterior(
    world: &LinearGaussianWorld,
    xs: &[DVector<f64>],
    subset: SubsetMask,
) -> Result<FullGaussian> {
    if xs.len() != world.num_modalities() {
        return Err(Error::DimMismatch {
            expected: world.num_modalities(),
            got: xs.len(),
        });
    }
    let d = world.latent_dim;
    let mut precision = DMatrix::<f64>::identity(d, d);
    let mut shift = DVector::<f64>::zeros(d);
    for j in subset.members() {
        let m = &world.modalities[j];
        if xs[j].len() != m.loading.nrows() {
            return Err(Error::DimMismatch {
                expected: m.loading.nrows(),
                got: xs[j].len(),
            });
        }
        precision += m.loading.transpose() * &m.loading / m.noise_var;
        shift += m.loading.transpose() * &xs[j] / m.noise_var;
    }
    let chol = precision.cholesky().ok_or(Error::SingularPrecision)?;
    let cov = chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    FullGaussian::new(&cov * shift, cov)
}

/// `log p(X_subset)` from `log p(X|z*) + log p(z*) - log p(z*|X)` at the posterior mean.
pub fn exact_log_marginal_subset(
    world: &LinearGaussianWorld,
    xs: &[DVector<f64>],
    subset: SubsetMask,
) -> Result<f64> {
    let post = exact_posterior(world, xs, subset)?;
    let z = post.mean.as_slice();
    Ok(world.log_joint(xs, subset, z) - post.log_prob(z))
}

/// `log p(X)` with every modality observed.
pub fn exact_log_marginal(world: &LinearGaussianWorld, xs: &[DVector<f64>]) -> Result<f64> {
    exact_log_marginal_subset(world, xs, world.full_mask())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::poe_fuse;
    use crate::rng::seeded;

    fn scalar_world(a: f64, rho: f64) -> LinearGaussianWorld {
        LinearGaussianWorld::new(
            1,
            vec![LinearModality {
                loading: DMatrix::from_element(1, 1, a),
                noise_var: rho,
            }],
        )
        .unwrap()
    }

    #[test]
    fn conjugate_update_small_case() {
        let w = scalar_world(1.0, 1.0);
        let xs = vec![DVector::from_element(1, 2.0)];
        let post = exact_posterior(&w, &xs, w.full_mask()).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uninformative_modality_gives_prior() {
        let w = scalar_world(0.0, 1.0);
        let xs = vec![DVector::from_element(1, 0.0)];
        let post = exact_posterior(&w, &xs, w.full_mask()).unwrap();
        assert_eq!(post.mean[0], 0.0);
        assert_eq!(post.cov[(0, 0)], 1.0);
        let lm = exact_log_marginal(&w, &xs).unwrap();
        assert!((lm + HALF_LOG_2PI).abs() < 1e-15);
    }

    #[test]
    fn marginal_matches_stacked_covariance() {
        // X ~ N(0, A A^T + diag(rho)) with A stacked over modalities.
        let mut rng = seeded(31);
        for _ in 0..20 {
            let w = LinearGaussianWorld::random(&mut rng, 2, &[2, 1, 3]);
            let (_, xs) = w.sample(&mut rng);
            let a = DMatrix::from_fn(6, 2, |r, c| {
                let (j, row) = match r {
                    0 | 1 => (0, r),
                    2 => (1, 0),
                    _ => (2, r - 3),
                };
                w.modalities[j].loading[(row, c)]
            });
            let noise = DVector::from_iterator(
                6,
                [0, 0, 1, 2, 2, 2].iter().map(|&j| w.modalities[j].noise_var),
            );
            let cov = &a * a.transpose() + DMatrix::from_diagonal(&noise);
            let x = DVector::from_iterator(6, xs.iter().flat_map(|v| v.iter().copied()));
            let direct = FullGaussian::new(DVector::zeros(6), cov).unwrap().log_prob(x.as_slice());
            assert!((exact_log_marginal(&w, &xs).unwrap() - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn second_identical_modality_adds_precision() {
        let one = scalar_world(1.3, 0.7);
        let mut two = one.clone();
        two.modalities.push(one.modalities[0].clone());
        let x = DVector::from_element(1, 0.4);
        let p1 = exact_posterior(&one, std::slice::from_ref(&x), one.full_mask()).unwrap();
        let p2 = exact_posterior(&two, &[x.clone(), x], two.full_mask()).unwrap();
        let lik = 1.3f64 * 1.3 / 0.7;
        assert!((1.0 / p1.cov[(0, 0)] - (1.0 + lik)).abs() < 1e-12);
        assert!((1.0 / p2.cov[(0, 0)] - (1.0 + 2.0 * lik)).abs() < 1e-12);
    }

    #[test]
    fn product_of_likelihood_experts_is_exact_in_diagonal_worlds() {
        let mut rng = seeded(8);
        for _ in 0..20 {
            let w = LinearGaussianWorld::random_diagonal(&mut rng, 2, 3);
            let (_, xs) = w.sample(&mut rng);
            for bits in 1..8u32 {
                let mask = SubsetMask::new(bits, 3).unwrap();
                let mut experts = vec![DiagonalGaussian::standard(2)];
                for j in mask.members() {
                    experts.push(w.likelihood_expert(&xs, j).unwrap());
                }
                let fused = poe_fuse(&experts).unwrap();
                let exact = exact_posterior(&w, &xs, mask).unwrap();
                assert!(exact.cov[(0, 1)].abs() < 1e-15);
                let diag = exact.to_diagonal().unwrap();
                for i in 0..2 {
                    assert!((fused.mu()[i] - diag.mu()[i]).abs() < 1e-12);
                    assert!((fused.log_var()[i] - diag.log_var()[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn full_gaussian_kl_matches_diagonal() {
        let q = DiagonalGaussian::new(vec![0.4, -1.0], vec![0.3, -0.5]).unwrap();
        let f = FullGaussian::new(
            DVector::from_column_slice(q.mu()),
            DMatrix::from_diagonal(&DVector::from_vec(q.variance())),
        )
        .unwrap();
        assert!((f.kl_to_standard_normal() - q.kl_to_standard_normal()).abs() < 1e-14);
        assert!((f.log_prob(&[0.1, 0.2]) - q.log_prob(&[0.1, 0.2]).unwrap()).abs() < 1e-14);
    }
}
