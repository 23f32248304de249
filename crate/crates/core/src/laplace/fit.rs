use super::posterior::{GaussianPosterior, PriorConfig, MAX_POSTERIOR_DIM};
use crate::model::{classifier_logits, Linearization};
use crate::numerics::{sigmoid, softmax, Matrix};
use crate::{Error, Result};

/// Last-layer Laplace fit at the MAP classifier.
///
/// The precision is the Gauss-Newton matrix of softmax cross-entropy plus
/// `γI`. For a linear classifier this is the exact Hessian of the regularized
/// loss. `map_classifier` uses the flatten order of
/// [`crate::model::MlpParams::classifier_flat`]: weight row-major, then bias.
pub fn fit_laplace(
    features: &Matrix,
    labels: &[usize],
    map_classifier: &[f64],
    prior: &PriorConfig,
) -> Result<GaussianPosterior> {
    prior.validate()?;
    let d = features.cols();
    let p = map_classifier.len();
    if !p.is_multiple_of(d + 1) || p == 0 {
        return Err(Error::DimensionMismatch {
            expected: d + 1,
            actual: p,
        });
    }
    if p > MAX_POSTERIOR_DIM {
        return Err(Error::PosteriorTooLarge {
            dim: p,
            cap: MAX_POSTERIOR_DIM,
        });
    }
    if labels.len() != features.rows() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            actual: labels.len(),
        });
    }
    let precision = ggn_precision(features, map_classifier, prior.prior_precision);
    GaussianPosterior::from_precision(map_classifier.to_vec(), &precision)
}

/// `Σ_n J_nᵀ Λ_n J_n + γI` over the rows of `features`.
pub fn ggn_precision(features: &Matrix, classifier: &[f64], gamma: f64) -> Matrix {
    let d = features.cols();
    let k = classifier.len() / (d + 1);
    let p = classifier.len();
    let idx = |class: usize, u: usize| if u < d { class * d + u } else { d * k + class };

    // Accumulate Σ_n Λ_n ⊗ z̃_n z̃_nᵀ block by block, z̃ = (z, 1).
    let mut h = Matrix::zeros(p, p);
    let mut zz = vec![0.0; (d + 1) * (d + 1)];
    let mut ext = vec![1.0; d + 1];
    for n in 0..features.rows() {
        let z = features.row(n);
        ext[..d].copy_from_slice(z);
        for u in 0..=d {
            for v in 0..=d {
                zz[u * (d + 1) + v] = ext[u] * ext[v];
            }
        }
        let probs = softmax(&classifier_logits(classifier, z, k));
        for i in 0..k {
            for j in 0..k {
                let lam = if i == j {
                    probs[i] - probs[i] * probs[j]
                } else {
                    -probs[i] * probs[j]
                };
                if lam == 0.0 {
                    continue;
                }
                for u in 0..=d {
                    let row = idx(i, u);
                    for v in 0..=d {
                        let col = idx(j, v);
                        h[(row, col)] += lam * zz[u * (d + 1) + v];
                    }
                }
            }
        }
    }
    h.add_diagonal_assign(gamma);
    h.symmetrize();
    h
}

/// Binary probit predictive `σ(f / √(1 + π S / 8))`, `S = j Σ jᵀ`.
pub fn probit_predict_binary(post: &GaussianPosterior, lin: &Linearization) -> Result<f64> {
    let (f, j) = lin.binary_margin()?;
    if j.len() != post.dim() {
        return Err(Error::DimensionMismatch {
            expected: post.dim(),
            actual: j.len(),
        });
    }
    let s = post.covariance().quad_form(&j)?;
    Ok(probit(f, s))
}

/// `σ(f / √(1 + π s / 8))`
pub fn probit(f: f64, s: f64) -> f64 {
    sigmoid(f / (1.0 + std::f64::consts::PI * s.max(0.0) / 8.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cross_entropy;
    use crate::numerics::{symmetric_eigenvalues, RngStream};

    fn regularized_loss(f: &Matrix, y: &[usize], phi: &[f64], gamma: f64) -> f64 {
        let k = phi.len() / (f.cols() + 1);
        let ce: f64 = (0..f.rows())
            .map(|n| cross_entropy(&classifier_logits(phi, f.row(n), k), y[n]))
            .sum();
        ce + 0.5 * gamma * phi.iter().map(|x| x * x).sum::<f64>()
    }

    fn numeric_hessian(f: &Matrix, y: &[usize], phi: &[f64], gamma: f64) -> Matrix {
        let p = phi.len();
        let h = 1e-3;
        let eval = |di: usize, si: f64, dj: usize, sj: f64| {
            let mut x = phi.to_vec();
            x[di] += si * h;
            x[dj] += sj * h;
            regularized_loss(f, y, &x, gamma)
        };
        Matrix::from_fn(p, p, |i, j| {
            (eval(i, 1.0, j, 1.0) - eval(i, 1.0, j, -1.0) - eval(i, -1.0, j, 1.0)
                + eval(i, -1.0, j, -1.0))
                / (4.0 * h * h)
        })
    }

    #[test]
    fn no_data_gives_prior_covariance() {
        let f = Matrix::zeros(0, 3);
        let post = fit_laplace(
            &f,
            &[],
            &[0.3; 8],
            &PriorConfig {
                prior_precision: 4.0,
            },
        )
        .unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 0.25 } else { 0.0 };
                assert_eq!(post.covariance()[(i, j)], want);
            }
        }
    }

    #[test]
    fn precision_matches_numeric_hessian_on_tiny_logistic() {
        let f = Matrix::from_rows(&[vec![-1.0], vec![0.5], vec![2.0]]);
        let y = [0, 1, 1];
        let phi = [0.4, -0.3, 0.1, 0.2];
        let h = ggn_precision(&f, &phi, 1.0);
        let num = numeric_hessian(&f, &y, &phi, 1.0);
        let rel = h.sub(&num).unwrap().frobenius_norm() / num.frobenius_norm();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn doubling_prior_shrinks_every_eigenvalue() {
        let mut rng = RngStream::new(5, 0);
        let f = Matrix::from_fn(6, 2, |_, _| rng.standard_normal());
        let y = [0, 1, 2, 0, 1, 2];
        let phi: Vec<f64> = (0..9).map(|_| rng.standard_normal()).collect();
        let a = fit_laplace(
            &f,
            &y,
            &phi,
            &PriorConfig {
                prior_precision: 1.0,
            },
        )
        .unwrap();
        let b = fit_laplace(
            &f,
            &y,
            &phi,
            &PriorConfig {
                prior_precision: 2.0,
            },
        )
        .unwrap();
        let ea = symmetric_eigenvalues(a.covariance());
        let eb = symmetric_eigenvalues(b.covariance());
        for (x, y) in ea.iter().zip(&eb) {
            assert!(y < x);
        }
    }

    #[test]
    fn covariance_inverts_precision() {
        let mut rng = RngStream::new(6, 0);
        let f = Matrix::from_fn(10, 3, |_, _| rng.standard_normal());
        let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let phi: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
        let post = fit_laplace(&f, &y, &phi, &PriorConfig::default()).unwrap();
        let h = ggn_precision(&f, &phi, 1.0);
        let prod = h.matmul(post.covariance()).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(8)) < 1e-8);
        assert!(post.covariance().is_symmetric(1e-10));
    }

    #[test]
    fn too_large_is_rejected() {
        let f = Matrix::zeros(0, 4096);
        let r = fit_laplace(&f, &[], &vec![0.0; 4097 * 2], &PriorConfig::default());
        assert!(matches!(r, Err(Error::PosteriorTooLarge { .. })));
    }

    #[test]
    fn probit_cases() {
        assert_eq!(probit(1.3, 0.0), sigmoid(1.3));
        assert_eq!(probit(0.0, 123.0), 0.5);
        let v = probit(2.0, 8.0 / std::f64::consts::PI);
        assert!((v - sigmoid(2f64.sqrt())).abs() < 1e-15);
        assert!((v - 0.8044).abs() < 1e-4);
    }
}
