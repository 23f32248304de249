use serde::{Deserialize, Serialize};

use crate::numerics::{
    cholesky_with_jitter, mvn_log_density, mvn_log_density_grad, sample_mvn, softmax,
    symmetric_eigenvalues, Matrix, RngStream, SpdFactor,
};
use crate::{Error, Result};

/// Largest classifier dimension handled with a full covariance.
pub const MAX_POSTERIOR_DIM: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Precision `γ` of the isotropic Gaussian prior `N(0, γ⁻¹ I)`.
    pub prior_precision: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            prior_precision: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_precision > 0.0) || !self.prior_precision.is_finite() {
            return Err(Error::InvalidArgument("prior_precision must be > 0".into()));
        }
        Ok(())
    }
}

/// Gaussian over flattened classifier parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    mean: Vec<f64>,
    covariance: Matrix,
    covariance_factor: SpdFactor,
    precision_factor: SpdFactor,
}

fn check_dim(mean: &[f64], m: &Matrix) -> Result<()> {
    if !m.is_square() || m.rows() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            actual: m.rows(),
        });
    }
    if mean.len() > MAX_POSTERIOR_DIM {
        return Err(Error::PosteriorTooLarge {
            dim: mean.len(),
            cap: MAX_POSTERIOR_DIM,
        });
    }
    Ok(())
}

impl GaussianPosterior {
    /// Builds the posterior from a precision (Hessian) matrix.
    pub fn from_precision(mean: Vec<f64>, precision: &Matrix) -> Result<Self> {
        check_dim(&mean, precision)?;
        let precision_factor =
            cholesky_with_jitter(precision).map_err(|_| Error::DegenerateHessian)?;
        let covariance = precision_factor.inverse();
        let covariance_factor =
            cholesky_with_jitter(&covariance).map_err(|_| Error::DegenerateHessian)?;
        Ok(Self {
            mean,
            covariance,
            covariance_factor,
            precision_factor,
        })
    }

    pub fn from_covariance(mean: Vec<f64>, covariance: Matrix) -> Result<Self> {
        check_dim(&mean, &covariance)?;
        let mut covariance = covariance;
        covariance.symmetrize();
        let covariance_factor = cholesky_with_jitter(&covariance)?;
        let precision = covariance_factor.inverse();
        let precision_factor = cholesky_with_jitter(&precision)?;
        Ok(Self {
            mean,
            covariance,
            covariance_factor,
            precision_factor,
        })
    }

    /// `N(mean, variance · I)`
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let p = mean.len();
        let mut cov = Matrix::identity(p);
        cov.data_mut().iter_mut().for_each(|x| *x *= variance);
        Self::from_covariance(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn covariance_factor(&self) -> &SpdFactor {
        &self.covariance_factor
    }

    /// Cholesky factor of the precision `H = Σ⁻¹`.
    pub fn precision_factor(&self) -> &SpdFactor {
        &self.precision_factor
    }

    pub fn min_eigenvalue(&self) -> f64 {
        symmetric_eigenvalues(&self.covariance)[0]
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        sample_mvn(&self.mean, &self.covariance_factor, rng).expect("dimensions agree")
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        mvn_log_density(x, &self.mean, &self.covariance_factor)
    }

    pub fn log_density_grad(&self, x: &[f64]) -> Vec<f64> {
        mvn_log_density_grad(x, &self.mean, &self.covariance_factor)
    }

    /// Same covariance, new mean.
    pub fn with_mean(&self, mean: Vec<f64>) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: mean.len(),
            });
        }
        Ok(Self {
            mean,
            ..self.clone()
        })
    }
}

/// Source of classifier parameter draws for Monte Carlo prediction.
pub trait ClassifierSampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut RngStream) -> Vec<f64>;
}

impl ClassifierSampler for GaussianPosterior {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        GaussianPosterior::sample(self, rng)
    }
}

/// Deterministic classifier: a zero-covariance posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass(pub Vec<f64>);

impl ClassifierSampler for PointMass {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        sample_mvn(&self.0, &SpdFactor::zero(self.0.len()), rng).expect("dimensions agree")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    MonteCarlo,
    ProbitBinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub mc_samples: usize,
    pub mode: PredictMode,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            mc_samples: 64,
            mode: PredictMode::MonteCarlo,
        }
    }
}

/// Monte Carlo predictive `(1/M) Σ softmax(g(z; φ⁽ⁱ⁾))` for one feature vector.
pub fn mc_predict(
    sampler: &dyn ClassifierSampler,
    features: &[f64],
    samples: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let z = Matrix::from_vec(1, features.len(), features.to_vec())?;
    Ok(mc_predict_batch(sampler, &z, samples, rng)?.row(0).to_vec())
}

/// Predictive for every row of `features`, sharing the same `M` parameter
/// draws across rows. Consumes exactly `M` draws from `rng`.
pub fn mc_predict_batch(
    sampler: &dyn ClassifierSampler,
    features: &Matrix,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Matrix> {
    if samples == 0 {
        return Err(Error::InvalidArgument("mc_samples must be >= 1".into()));
    }
    let d = features.cols();
    let p = sampler.dim();
    if !p.is_multiple_of(d + 1) {
        return Err(Error::DimensionMismatch {
            expected: p,
            actual: d,
        });
    }
    let k = p / (d + 1);
    let draws: Vec<Vec<f64>> = (0..samples).map(|_| sampler.sample(rng)).collect();
    let mut out = Matrix::zeros(features.rows(), k);
    let inv = 1.0 / samples as f64;
    for r in 0..features.rows() {
        let z = features.row(r);
        let acc = out.row_mut(r);
        for phi in &draws {
            let probs = softmax(&crate::model::classifier_logits(phi, z, k));
            for (a, p) in acc.iter_mut().zip(probs) {
                *a += p;
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Ok(out)
}
