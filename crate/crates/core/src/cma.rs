//! CMA-ES search distribution and update rule.
//!
//! The same state machine is driven by the clients (one update per local
//! iteration) and by the server (one update per round, with the client means
//! as the population). The caller supplies the step length used to normalize
//! displacements, which is how the server plugs in its corrected step.
//!
//! Learning rates follow the standard tutorial defaults computed from the
//! dimension and the variance-effective selection mass.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on every step length.
pub const SIGMA_MIN: f64 = 1e-12;

/// Diagonal jitter added once when the covariance loses definiteness.
pub const SPD_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `w_k = 1/mu`.
    #[default]
    Equal,
    /// `w_k ∝ ln((lambda+1)/2) - ln k`, normalized.
    Logarithmic,
}

/// Strategy parameters for one CMA-ES instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaParams {
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_w: f64,
    pub c_c: f64,
    pub c_sigma: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub d_sigma: f64,
    /// Recompute the eigendecomposition every this many updates.
    pub eigen_refresh: usize,
}

impl CmaParams {
    /// Defaults for dimension `dim` and population `lambda`, with
    /// `mu = max(1, floor(lambda / 2))`.
    pub fn new(dim: usize, lambda: usize, scheme: WeightScheme) -> Result<Self> {
        Self::with_mu(dim, lambda, (lambda / 2).max(1), scheme)
    }

    /// Standalone defaults: `lambda = 4 + floor(3 ln dim)` and logarithmic
    /// weights.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(dim, default_population(dim), WeightScheme::Logarithmic)
    }

    pub fn with_mu(dim: usize, lambda: usize, mu: usize, scheme: WeightScheme) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if lambda == 0 || mu == 0 || mu > lambda {
            return Err(Error::invalid(format!("need 1 <= mu <= lambda, got mu={mu} lambda={lambda}")));
        }
        let weights = match scheme {
            WeightScheme::Equal => vec![1.0 / mu as f64; mu],
            WeightScheme::Logarithmic => {
                let raw: Vec<f64> = (1..=mu).map(|k| ((lambda as f64 + 1.0) / 2.0).ln() - (k as f64).ln()).collect();
                let total: f64 = raw.iter().sum();
                if total > 0.0 && raw.iter().all(|w| *w >= 0.0) {
                    raw.iter().map(|w| w / total).collect()
                } else {
                    vec![1.0 / mu as f64; mu]
                }
            }
        };
        let mu_w = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let n = dim as f64;

        let c_sigma = (mu_w + 2.0) / (n + mu_w + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_w - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_w / n) / (n + 4.0 + 2.0 * mu_w / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_w);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_w - 2.0 + 1.0 / mu_w) / ((n + 2.0).powi(2) + mu_w));

        Ok(Self { lambda, mu, weights, mu_w, c_c, c_sigma, c_1, c_mu: c_mu.max(0.0), d_sigma, eigen_refresh: 1 })
    }
}

/// `4 + floor(3 ln dim)`.
pub fn default_population(dim: usize) -> usize {
    4 + (3.0 * (dim.max(1) as f64).ln()).floor() as usize
}

/// A candidate and its fitness (lower is better).
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSample {
    pub point: Vec<f64>,
    pub fitness: f64,
}

impl RankedSample {
    pub fn new(point: Vec<f64>, fitness: f64) -> Self {
        Self { point, fitness }
    }
}

/// Multivariate normal search distribution `N(mean, step^2 * cov)` plus the
/// two evolution paths.
#[derive(Debug, Clone)]
pub struct SearchDistribution {
    mean: DVector<f64>,
    step: f64,
    cov: DMatrix<f64>,
    path_cov: DVector<f64>,
    path_step: DVector<f64>,
    generation: u64,
    // Cached eigendecomposition of `cov`: cov = B diag(eigvals) B^T.
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
    updates_since_eigen: usize,
}

impl SearchDistribution {
    pub fn new(dim: usize, mean0: &[f64], sigma0: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if !sigma0.is_finite() || sigma0 <= 0.0 {
            return Err(Error::invalid(format!("initial step must be positive, got {sigma0}")));
        }
        if mean0.len() != dim {
            return Err(Error::invalid(format!("initial mean has length {}, expected {dim}", mean0.len())));
        }
        if mean0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("initial mean must be finite"));
        }
        Ok(Self {
            mean: DVector::from_column_slice(mean0),
            step: sigma0.max(SIGMA_MIN),
            cov: DMatrix::identity(dim, dim),
            path_cov: DVector::zeros(dim),
            path_step: DVector::zeros(dim),
            generation: 0,
            eigvecs: DMatrix::identity(dim, dim),
            eigvals: DVector::from_element(dim, 1.0),
            updates_since_eigen: 0,
        })
    }

    /// Rebuilds a distribution from transmitted parameters. Paths start at zero.
    pub fn from_parts(mean: &[f64], step: f64, cov: DMatrix<f64>, generation: u64) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::invalid(format!("covariance is {}x{}, expected {dim}x{dim}", cov.nrows(), cov.ncols())));
        }
        if !step.is_finite() || step < 0.0 {
            return Err(Error::invalid(format!("step must be non-negative, got {step}")));
        }
        let mut dist = Self::new(dim, mean, 1.0)?;
        dist.step = step.max(SIGMA_MIN);
        dist.cov = cov;
        dist.generation = generation;
        symmetrize(&mut dist.cov);
        dist.refresh_eigen()?;
        Ok(dist)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Same state with the step replaced (floored at `SIGMA_MIN`).
    pub fn with_step(mut self, step: f64) -> Result<Self> {
        if !step.is_finite() || step < 0.0 {
            return Err(Error::invalid(format!("step must be finite and non-negative, got {step}")));
        }
        self.step = step.max(SIGMA_MIN);
        Ok(self)
    }

    pub fn path_cov(&self) -> &[f64] {
        self.path_cov.as_slice()
    }

    pub fn path_step(&self) -> &[f64] {
        self.path_step.as_slice()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Smallest eigenvalue of the covariance from the cached decomposition.
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigvals.min()
    }

    /// Draws `lambda` points `mean + step * B D^{1/2} u` with `u ~ N(0, I)`.
    pub fn sample_population<R: Rng + ?Sized>(&self, lambda: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let scale = self.eigvals.map(|v| v.max(0.0).sqrt());
        (0..lambda)
            .map(|_| {
                let u = DVector::from_fn(dim, |i, _| scale[i] * rng.sample::<f64, _>(StandardNormal));
                let y = &self.eigvecs * u;
                (&self.mean + y * self.step).as_slice().to_vec()
            })
            .collect()
    }

    /// Symmetric inverse square root of the covariance, from a fresh
    /// eigendecomposition.
    pub fn inverse_sqrt_cov(&self) -> Result<DMatrix<f64>> {
        let eig = SymmetricEigen::new(self.cov.clone());
        if eig.eigenvalues.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::NumericFailure("covariance is not positive-definite".into()));
        }
        Ok(whitening(&eig.eigenvectors, &eig.eigenvalues))
    }

    /// One CMA-ES generation. `effective_step` normalizes the mean and sample
    /// displacements; the returned step is the cumulative step-size update
    /// applied to it.
    pub fn update(
        &self,
        samples: &[RankedSample],
        params: &CmaParams,
        effective_step: f64,
    ) -> Result<SearchDistribution> {
        let dim = self.dim();
        if samples.len() < params.mu {
            return Err(Error::invalid(format!(
                "update needs at least mu={} samples, got {}",
                params.mu,
                samples.len()
            )));
        }
        if let Some(bad) = samples.iter().find(|s| !s.fitness.is_finite()) {
            return Err(Error::invalid(format!("non-finite fitness {}", bad.fitness)));
        }
        if let Some(bad) = samples.iter().find(|s| s.point.len() != dim) {
            return Err(Error::invalid(format!("sample has length {}, expected {dim}", bad.point.len())));
        }
        if !effective_step.is_finite() || effective_step <= 0.0 {
            return Err(Error::invalid(format!("effective step must be positive, got {effective_step}")));
        }

        let mut order: Vec<usize> = (0..samples.len()).collect();
        // stable: ties keep input order
        order.sort_by(|&a, &b| samples[a].fitness.total_cmp(&samples[b].fitness));
        let selected: Vec<DVector<f64>> =
            order[..params.mu].iter().map(|&i| DVector::from_column_slice(&samples[i].point)).collect();

        let mut new_mean = DVector::zeros(dim);
        for (w, x) in params.weights.iter().zip(&selected) {
            new_mean.axpy(*w, x, 1.0);
        }

        let n = dim as f64;
        let y_w = (&new_mean - &self.mean) / effective_step;
        let inv_sqrt = whitening(&self.eigvecs, &self.eigvals);

        let cs = params.c_sigma;
        let path_step = &self.path_step * (1.0 - cs) + (&inv_sqrt * &y_w) * (cs * (2.0 - cs) * params.mu_w).sqrt();

        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        let ps_norm = path_step.norm();
        let debias = (1.0 - (1.0 - cs).powf(2.0 * (self.generation as f64 + 1.0))).sqrt();
        let h_sigma = if ps_norm / debias < (1.4 + 2.0 / (n + 1.0)) * chi_n { 1.0 } else { 0.0 };

        let cc = params.c_c;
        let path_cov = &self.path_cov * (1.0 - cc) + &y_w * (h_sigma * (cc * (2.0 - cc) * params.mu_w).sqrt());

        let weight_sum: f64 = params.weights.iter().sum();
        let decay = 1.0 - params.c_1 - params.c_mu * weight_sum + (1.0 - h_sigma) * params.c_1 * cc * (2.0 - cc);
        let mut cov = &self.cov * decay;
        cov.ger(params.c_1, &path_cov, &path_cov, 1.0);
        if params.c_mu > 0.0 {
            for (w, x) in params.weights.iter().zip(&selected) {
                let y = (x - &self.mean) / effective_step;
                cov.ger(params.c_mu * w, &y, &y, 1.0);
            }
        }
        symmetrize(&mut cov);

        let step = (effective_step * ((cs / params.d_sigma) * (ps_norm / chi_n - 1.0)).exp()).max(SIGMA_MIN);
        if !step.is_finite() {
            return Err(Error::NumericFailure("step length overflowed".into()));
        }
        if new_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("mean became non-finite".into()));
        }

        let mut next = SearchDistribution {
            mean: new_mean,
            step,
            cov,
            path_cov,
            path_step,
            generation: self.generation + 1,
            eigvecs: self.eigvecs.clone(),
            eigvals: self.eigvals.clone(),
            updates_since_eigen: self.updates_since_eigen + 1,
        };
        if next.updates_since_eigen >= params.eigen_refresh.max(1) {
            next.refresh_eigen()?;
        }
        Ok(next)
    }

    fn refresh_eigen(&mut self) -> Result<()> {
        if self.cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("covariance has non-finite entries".into()));
        }
        let mut eig = SymmetricEigen::new(self.cov.clone());
        if eig.eigenvalues.min() <= 0.0 {
            let dim = self.dim();
            self.cov += DMatrix::<f64>::identity(dim, dim) * SPD_JITTER;
            eig = SymmetricEigen::new(self.cov.clone());
            if eig.eigenvalues.min() <= 0.0 {
                return Err(Error::NumericFailure(format!(
                    "covariance not positive-definite after regularization (min eigenvalue {})",
                    eig.eigenvalues.min()
                )));
            }
        }
        self.eigvecs = eig.eigenvectors;
        self.eigvals = eig.eigenvalues;
        self.updates_since_eigen = 0;
        Ok(())
    }
}

fn whitening(eigvecs: &DMatrix<f64>, eigvals: &DVector<f64>) -> DMatrix<f64> {
    let inv = DMatrix::from_diagonal(&eigvals.map(|v| 1.0 / v.sqrt()));
    eigvecs * inv * eigvecs.transpose()
}

// Writes the averaged value to both triangles so C[i][j] == C[j][i] bitwise.
fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
