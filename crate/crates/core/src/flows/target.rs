use crate::laplace::GaussianPosterior;
use crate::numerics::{dot, Matrix};
use crate::{Error, Result};

/// Unnormalized log density with gradient.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density_and_grad(&self, phi: &[f64]) -> (f64, Vec<f64>);

    fn log_density(&self, phi: &[f64]) -> f64 {
        self.log_density_and_grad(phi).0
    }
}

/// `log p(D | φ) + log N(φ | 0, γ⁻¹ I)` up to a constant, for a linear
/// softmax classifier on frozen features.
#[derive(Debug, Clone)]
pub struct ClassifierTarget {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    prior_precision: f64,
}

impl ClassifierTarget {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        class_count: usize,
        prior_precision: f64,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        if !(prior_precision > 0.0) {
            return Err(Error::InvalidArgument("prior_precision must be > 0".into()));
        }
        Ok(Self {
            features,
            labels,
            class_count,
            prior_precision,
        })
    }
}

impl LogDensity for ClassifierTarget {
    fn dim(&self) -> usize {
        (self.features.cols() + 1) * self.class_count
    }

    fn log_density_and_grad(&self, phi: &[f64]) -> (f64, Vec<f64>) {
        let d = self.features.cols();
        let k = self.class_count;
        let gamma = self.prior_precision;
        let mut value = -0.5 * gamma * phi.iter().map(|x| x * x).sum::<f64>();
        let mut grad: Vec<f64> = phi.iter().map(|x| -gamma * x).collect();
        let (w, b) = phi.split_at(d * k);
        let mut probs = vec![0.0; k];
        for (n, &y) in self.labels.iter().enumerate() {
            let z = self.features.row(n);
            for (c, p) in probs.iter_mut().enumerate() {
                *p = b[c] + dot(&w[c * d..(c + 1) * d], z);
            }
            let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let true_logit = probs[y];
            let mut sum = 0.0;
            for p in probs.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            value += true_logit - max - sum.ln();
            for (c, p) in probs.iter().enumerate() {
                let resid = (c == y) as u8 as f64 - p / sum;
                if resid == 0.0 {
                    continue;
                }
                let row = &mut grad[c * d..(c + 1) * d];
                row.iter_mut().zip(z).for_each(|(g, zi)| *g += resid * zi);
                grad[d * k + c] += resid;
            }
        }
        (value, grad)
    }
}

impl LogDensity for GaussianPosterior {
    fn dim(&self) -> usize {
        GaussianPosterior::dim(self)
    }

    fn log_density_and_grad(&self, phi: &[f64]) -> (f64, Vec<f64>) {
        (self.log_density(phi), self.log_density_grad(phi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn classifier_target_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(9, 0);
        let f = Matrix::from_fn(7, 3, |_, _| rng.standard_normal());
        let labels = vec![0, 1, 2, 1, 0, 2, 2];
        let t = ClassifierTarget::new(f, labels, 3, 0.7).unwrap();
        let phi = rng.normal_vec(t.dim());
        let (_, g) = t.log_density_and_grad(&phi);
        let h = 1e-6;
        for i in 0..phi.len() {
            let mut a = phi.clone();
            let mut b = phi.clone();
            a[i] += h;
            b[i] -= h;
            let num = (t.log_density(&a) - t.log_density(&b)) / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-5 * (1.0 + num.abs()), "{i}");
        }
    }

    #[test]
    fn rejects_bad_labels() {
        let f = Matrix::zeros(1, 2);
        assert!(ClassifierTarget::new(f, vec![3], 3, 1.0).is_err());
    }
}
