use crate::laplace::GaussianPosterior;
use crate::numerics::Matrix;
use crate::{Error, Result};

fn check_weights(n: usize, weights: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "weights must be non-negative and sum to 1, got {total}"
        )));
    }
    Ok(())
}

/// Moment-matched Gaussian of the mixture `Σ πᵢ N(μᵢ, Σᵢ)`:
/// `μ = Σ πᵢ μᵢ`, `Σ = Σ πᵢ (Σᵢ + μᵢμᵢᵀ) − μμᵀ`.
pub fn aggregate_gaussians(
    posteriors: &[&GaussianPosterior],
    weights: &[f64],
) -> Result<GaussianPosterior> {
    check_weights(posteriors.len(), weights)?;
    let p = posteriors[0].dim();
    if let Some(bad) = posteriors.iter().find(|g| g.dim() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            actual: bad.dim(),
        });
    }
    if posteriors.len() == 1 {
        return Ok(posteriors[0].clone());
    }
    let mut mean = vec![0.0; p];
    for (g, &w) in posteriors.iter().zip(weights) {
        mean.iter_mut().zip(g.mean()).for_each(|(m, x)| *m += w * x);
    }
    // Σ πᵢ (Σᵢ + (μᵢ − μ)(μᵢ − μ)ᵀ) is the same quantity with less cancellation.
    let mut cov = Matrix::zeros(p, p);
    for (g, &w) in posteriors.iter().zip(weights) {
        cov.add_scaled_assign(w, g.covariance())?;
        let dev: Vec<f64> = g.mean().iter().zip(&mean).map(|(a, b)| a - b).collect();
        cov.add_outer_assign(w, &dev, &dev)?;
    }
    cov.symmetrize();
    GaussianPosterior::from_covariance(mean, cov)
}

/// Weighted mean of equally shaped parameter vectors.
pub fn aggregate_deterministic(params: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    check_weights(params.len(), weights)?;
    let p = params[0].len();
    if let Some(bad) = params.iter().find(|v| v.len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            actual: bad.len(),
        });
    }
    if params.len() == 1 {
        return Ok(params[0].to_vec());
    }
    let mut out = vec![0.0; p];
    for (v, &w) in params.iter().zip(weights) {
        out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += w * x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example_one_dimensional() {
        let a = GaussianPosterior::isotropic(vec![0.0], 1.0).unwrap();
        let b = GaussianPosterior::isotropic(vec![2.0], 1.0).unwrap();
        let g = aggregate_gaussians(&[&a, &b], &[0.5, 0.5]).unwrap();
        assert_eq!(g.mean(), &[1.0]);
        assert_eq!(g.covariance()[(0, 0)], 2.0);
    }

    #[test]
    fn single_client_is_identity() {
        let a = GaussianPosterior::isotropic(vec![0.3, 0.1], 0.7).unwrap();
        assert_eq!(aggregate_gaussians(&[&a], &[1.0]).unwrap(), a);
    }

    #[test]
    fn midpoint_and_identical() {
        let z = [0.0, 0.0];
        let t = [2.0, 2.0];
        assert_eq!(
            aggregate_deterministic(&[&z, &t], &[0.5, 0.5]).unwrap(),
            vec![1.0, 1.0]
        );
        let v = [0.3, -0.7];
        assert_eq!(
            aggregate_deterministic(&[&v, &v], &[0.5, 0.5]).unwrap(),
            v.to_vec()
        );
    }

    #[test]
    fn mismatches_rejected() {
        let a = GaussianPosterior::isotropic(vec![0.0], 1.0).unwrap();
        let b = GaussianPosterior::isotropic(vec![0.0, 1.0], 1.0).unwrap();
        assert!(matches!(
            aggregate_gaussians(&[&a, &b], &[0.5, 0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(aggregate_deterministic(&[&[1.0][..], &[1.0, 2.0][..]], &[0.5, 0.5]).is_err());
        assert!(aggregate_deterministic(&[&[1.0][..]], &[0.7]).is_err());
    }
}
