use crate::error::{Error, Result};

/// Tensor-product trapezoidal grid in one or two dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: Vec<usize>,
}

pub const MIN_POINTS: usize = 64;
/// Bounds must reach at least this many prior standard deviations.
pub const MIN_HALF_WIDTH: f64 = 6.0;
/// Largest change allowed when the resolution is doubled.
pub const CONVERGENCE_TOL: f64 = 1e-6;

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        let d = lo.len();
        if d == 0 || d > 2 || hi.len() != d || points.len() != d {
            return Err(Error::ConfigInvalid(format!(
                "grid needs 1 or 2 dimensions with matching bounds, got {d}"
            )));
        }
        for i in 0..d {
            if points[i] < MIN_POINTS {
                return Err(Error::ConfigInvalid(format!(
                    "grid needs at least {MIN_POINTS} points per dimension"
                )));
            }
            if lo[i] > -MIN_HALF_WIDTH || hi[i] < MIN_HALF_WIDTH {
                return Err(Error::ConfigInvalid(format!(
                    "grid bounds [{}, {}] do not cover {MIN_HALF_WIDTH} prior standard deviations",
                    lo[i], hi[i]
                )));
            }
        }
        Ok(Self { lo, hi, points })
    }

    /// Symmetric grid on `[-half_width, half_width]^dim`.
    pub fn symmetric(dim: usize, half_width: f64, points: usize) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim], vec![points; dim])
    }

    /// Bounds covering the prior and `reach` standard deviations around each
    /// `(mean, sd)` per dimension.
    pub fn covering(dim: usize, spans: &[(Vec<f64>, Vec<f64>)], reach: f64, points: usize) -> Result<Self> {
        let mut lo = vec![-(reach.max(MIN_HALF_WIDTH)); dim];
        let mut hi = vec![reach.max(MIN_HALF_WIDTH); dim];
        for (mean, sd) in spans {
            for i in 0..dim {
                lo[i] = lo[i].min(mean[i] - reach * sd[i]);
                hi[i] = hi[i].max(mean[i] + reach * sd[i]);
            }
        }
        Self::new(lo, hi, vec![points; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn step(&self, i: usize) -> f64 {
        (self.hi[i] - self.lo[i]) / (self.points[i] - 1) as f64
    }

    /// The grid with every interval halved.
    pub fn refined(&self) -> Self {
        Self {
            lo: self.lo.clone(),
            hi: self.hi.clone(),
            points: self.points.iter().map(|n| 2 * n - 1).collect(),
        }
    }

    /// Trapezoidal integral of `f`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let weight = |i: usize, n: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        match self.dim() {
            1 => {
                let (n, h) = (self.points[0], self.step(0));
                (0..n)
                    .map(|i| weight(i, n) * f(&[self.lo[0] + i as f64 * h]))
                    .sum::<f64>()
                    * h
            }
            _ => {
                let (n0, h0) = (self.points[0], self.step(0));
                let (n1, h1) = (self.points[1], self.step(1));
                let mut total = 0.0;
                for i in 0..n0 {
                    let z0 = self.lo[0] + i as f64 * h0;
                    let mut row = 0.0;
                    for k in 0..n1 {
                        row += weight(k, n1) * f(&[z0, self.lo[1] + k as f64 * h1]);
                    }
                    total += weight(i, n0) * row;
                }
                total * h0 * h1
            }
        }
    }

    /// [`GridSpec::integrate`] at this and double resolution; errors if they
    /// differ by more than [`CONVERGENCE_TOL`], else returns the finer value.
    pub fn integrate_converged(&self, f: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let coarse = self.integrate(&f);
        let fine = self.refined().integrate(&f);
        let change = (fine - coarse).abs();
        if !(change <= CONVERGENCE_TOL) {
            return Err(Error::GridTooCoarse { change });
        }
        Ok(fine)
    }
}

/// `KL(p || q) = int p (log p - log q)` by converged quadrature.
pub fn grid_kl(
    p_log_density: impl Fn(&[f64]) -> f64,
    q_log_density: impl Fn(&[f64]) -> f64,
    grid: &GridSpec,
) -> Result<f64> {
    grid.integrate_converged(|z| {
        let lp = p_log_density(z);
        let p = lp.exp();
        if p == 0.0 {
            0.0
        } else {
            p * (lp - q_log_density(z))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::DiagonalGaussian;

    #[test]
    fn kl_small_cases() {
        let grid = GridSpec::symmetric(1, 12.0, 401).unwrap();
        let p = DiagonalGaussian::new(vec![1.0], vec![0.0]).unwrap();
        let q = DiagonalGaussian::standard(1);
        let same = grid_kl(|z| q.log_prob(z).unwrap(), |z| q.log_prob(z).unwrap(), &grid).unwrap();
        assert!(same.abs() < 1e-10);
        let kl = grid_kl(|z| p.log_prob(z).unwrap(), |z| q.log_prob(z).unwrap(), &grid).unwrap();
        assert!((kl - 0.5).abs() < 1e-6);
    }

    #[test]
    fn two_dimensional_mass() {
        let grid = GridSpec::symmetric(2, 9.0, 129).unwrap();
        let q = DiagonalGaussian::new(vec![0.5, -1.0], vec![0.2, -0.3]).unwrap();
        let mass = grid.integrate_converged(|z| q.log_prob(z).unwrap().exp()).unwrap();
        assert!((mass - 1.0).abs() < 1e-8);
    }

    #[test]
    fn coarse_grid_detected() {
        let grid = GridSpec::symmetric(1, 6.0, 64).unwrap();
        let spike = DiagonalGaussian::new(vec![0.013], vec![(1e-3f64).ln()]).unwrap();
        assert!(matches!(
            grid.integrate_converged(|z| spike.log_prob(z).unwrap().exp()),
            Err(Error::GridTooCoarse { .. })
        ));
        assert!(GridSpec::symmetric(1, 3.0, 100).is_err());
        assert!(GridSpec::symmetric(3, 8.0, 100).is_err());
        assert!(GridSpec::symmetric(1, 8.0, 10).is_err());
    }
}
