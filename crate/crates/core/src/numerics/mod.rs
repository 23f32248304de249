//! Dense linear algebra, Gaussian utilities and counter-based random streams.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{
    cholesky, cholesky_with_jitter, logsumexp, sigmoid, singular_values, softmax, softplus,
    softplus_inv, spectral_summary, symmetric_eigenvalues, SpdFactor, SpectralSummary,
    CHOLESKY_JITTER, PIVOT_FLOOR,
};
pub use matrix::{axpy, dot, norm, Matrix};
pub use rng::RngStream;

use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Draws `mean + L·z` with `z ~ N(0, I)`.
///
/// A zero factor returns `mean` exactly; the normal draws are still consumed
/// so stream positions do not depend on the covariance.
pub fn sample_mvn(mean: &[f64], factor: &SpdFactor, rng: &mut RngStream) -> Result<Vec<f64>> {
    if mean.len() != factor.dim() {
        return Err(Error::DimensionMismatch {
            expected: factor.dim(),
            actual: mean.len(),
        });
    }
    let z = rng.normal_vec(mean.len());
    let lz = factor.mul_lower(&z);
    Ok(mean.iter().zip(&lz).map(|(m, d)| m + d).collect())
}

/// `log N(x; mean, L Lᵀ)`.
pub fn mvn_log_density(x: &[f64], mean: &[f64], factor: &SpdFactor) -> f64 {
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let w = factor.solve_lower(&diff);
    -0.5 * (x.len() as f64 * LN_2PI + factor.log_det() + dot(&w, &w))
}

/// Gradient of [`mvn_log_density`] in `x`: `-Σ⁻¹ (x - mean)`.
pub fn mvn_log_density_grad(x: &[f64], mean: &[f64], factor: &SpdFactor) -> Vec<f64> {
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    factor.solve(&diff).into_iter().map(|v| -v).collect()
}
