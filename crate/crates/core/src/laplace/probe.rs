use serde::{Deserialize, Serialize};

use super::posterior::{mc_predict_batch, ClassifierSampler, GaussianPosterior, PointMass};
use crate::flows::{FlowPosterior, FlowStack};
use crate::model::{forward, MlpParams};
use crate::numerics::{dot, norm, sigmoid, singular_values, Matrix, RngStream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub deltas: Vec<f64>,
    pub mc_samples: usize,
    /// Posterior draws used to estimate the largest flow Jacobian singular value.
    pub jacobian_samples: usize,
    /// `δ₀` used to measure the far-field feature slope.
    pub reference_delta: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            deltas: vec![1e2, 1e3, 1e4],
            mc_samples: 65536,
            jacobian_samples: 256,
            reference_delta: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub deltas: Vec<f64>,
    /// Max-class probability of the point estimate at each `δ`.
    pub map_confidence: Vec<f64>,
    pub laplace_confidence: Vec<f64>,
    pub flow_confidence: Option<Vec<f64>>,
    /// `|μᵀv| / √((π/8) vᵀΣv)` with `v` the far-field margin direction.
    pub cap_argument: f64,
    /// `σ(cap_argument)`
    pub cap: f64,
    pub flow_jacobian_max_singular: Option<f64>,
    /// `σ(s_max · cap_argument)`
    pub flow_cap: Option<f64>,
    /// `‖μ‖` over the flattened classifier mean.
    pub mean_norm: f64,
    /// `‖u‖`, `u` the input-space slope of the margin at the mean.
    pub slope_norm: f64,
    /// Smallest singular value of `∂u/∂w`.
    pub slope_jacobian_min_singular: f64,
    pub covariance_min_eigenvalue: f64,
    /// Literal bound `σ(s_max·‖μ‖ / (s_min·√((π/8)·λ_min)))`.
    pub bound_with_mean_norm: f64,
    /// Same bound with `‖u‖` in place of `‖μ‖`.
    pub bound_with_slope_norm: f64,
}

/// Exact `∂z/∂x` of the extractor at `x` (features × input).
fn extractor_jacobian(params: &MlpParams, x: &[f64]) -> Result<Matrix> {
    let trace = forward(params, x)?;
    let mut j = Matrix::identity(params.input_dim());
    for (layer, pre) in params.extractor.iter().zip(&trace.pre_activations) {
        let mut next = layer.weight.matmul(&j)?;
        for (r, &z) in pre.iter().enumerate() {
            if z <= 0.0 {
                next.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        j = next;
    }
    Ok(j)
}

fn max_confidence(probs: &Matrix) -> Vec<f64> {
    (0..probs.rows())
        .map(|r| probs.row(r).iter().copied().fold(0.0, f64::max))
        .collect()
}

/// Far-field confidence probe along `direction` for a binary network.
///
/// Every column shares one clone of `rng`, so a flow whose layers all have
/// `β = 0` reproduces the Laplace column exactly.
pub fn asymptotic_confidence_probe(
    params: &MlpParams,
    post: &GaussianPosterior,
    flow: Option<&FlowStack>,
    direction: &[f64],
    cfg: &ProbeConfig,
    rng: &RngStream,
) -> Result<ProbeReport> {
    if params.class_count() != 2 {
        return Err(Error::InvalidArgument(
            "probe needs a binary classifier".into(),
        ));
    }
    if direction.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: direction.len(),
        });
    }
    if norm(direction) == 0.0 {
        return Err(Error::InvalidArgument(
            "probe direction must be non-zero".into(),
        ));
    }
    if post.dim() != params.classifier_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.classifier_dim(),
            actual: post.dim(),
        });
    }
    let d = params.feature_dim();
    let scaled = |s: f64| direction.iter().map(|v| v * s).collect::<Vec<_>>();

    let rows: Vec<Vec<f64>> = cfg
        .deltas
        .iter()
        .map(|&s| params.features(&scaled(s)))
        .collect();
    let feats = Matrix::from_rows(&rows);
    let map = PointMass(params.classifier_flat());
    let columns = |sampler: &dyn ClassifierSampler| -> Result<Vec<f64>> {
        let mut r = rng.clone();
        Ok(max_confidence(&mc_predict_batch(
            sampler,
            &feats,
            cfg.mc_samples,
            &mut r,
        )?))
    };
    let map_confidence = max_confidence(&mc_predict_batch(&map, &feats, 1, &mut rng.clone())?);
    let laplace_confidence = columns(post)?;
    let flow_confidence = match flow {
        Some(f) => Some(columns(&FlowPosterior {
            base: post,
            flow: f,
        })?),
        None => None,
    };

    // Far-field slope and margin direction v = (−a, +a, 0, 0).
    let d0 = cfg.reference_delta;
    let z1 = params.features(&scaled(d0));
    let z2 = params.features(&scaled(2.0 * d0));
    let a: Vec<f64> = z2.iter().zip(&z1).map(|(p, q)| (p - q) / d0).collect();
    let mut v = vec![0.0; post.dim()];
    for j in 0..d {
        v[j] = -a[j];
        v[d + j] = a[j];
    }
    let mu = post.mean();
    let num = dot(mu, &v).abs();
    let var = post.covariance().quad_form(&v)?;
    let cap_argument = if var > 0.0 {
        num / (std::f64::consts::PI / 8.0 * var).sqrt()
    } else {
        f64::INFINITY
    };
    let cap = sigmoid(cap_argument);

    let smax = match flow {
        Some(f) if !f.is_empty() => {
            let mut r = rng.derive(0x4a41_434f);
            let mut best: f64 = 0.0;
            for _ in 0..cfg.jacobian_samples {
                let x = post.sample(&mut r);
                best = best.max(singular_values(&f.jacobian(&x)?)[0]);
            }
            Some(best)
        }
        Some(_) => Some(1.0),
        None => None,
    };
    let flow_cap = smax.map(|s| sigmoid(s * cap_argument));

    // u = Aᵀ(w₁ − w₀) at the mean; ∂u/∂w stacks −A, +A and zero bias rows.
    let jac = extractor_jacobian(params, &scaled(d0))?;
    let wdiff: Vec<f64> = (0..d).map(|j| mu[d + j] - mu[j]).collect();
    let u = jac.tr_matvec(&wdiff)?;
    let mut du_dw = Matrix::zeros(post.dim(), params.input_dim());
    for j in 0..d {
        for c in 0..params.input_dim() {
            du_dw[(j, c)] = -jac[(j, c)];
            du_dw[(d + j, c)] = jac[(j, c)];
        }
    }
    let svals = singular_values(&du_dw.transpose());
    let smin_jt = svals.last().copied().unwrap_or(0.0);
    let lambda_min = post.min_eigenvalue();
    let s = smax.unwrap_or(1.0);
    let denom = smin_jt * (std::f64::consts::PI / 8.0 * lambda_min).sqrt();
    let mean_norm = norm(mu);
    let slope_norm = norm(&u);

    Ok(ProbeReport {
        deltas: cfg.deltas.clone(),
        map_confidence,
        laplace_confidence,
        flow_confidence,
        cap_argument,
        cap,
        flow_jacobian_max_singular: smax,
        flow_cap,
        mean_norm,
        slope_norm,
        slope_jacobian_min_singular: smin_jt,
        covariance_min_eigenvalue: lambda_min,
        bound_with_mean_norm: sigmoid(s * mean_norm / denom),
        bound_with_slope_norm: sigmoid(s * slope_norm / denom),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::RadialLayer;

    fn tiny() -> (MlpParams, GaussianPosterior) {
        let params = MlpParams::init(2, &[4], 2, &mut RngStream::new(3, 0));
        let post = GaussianPosterior::isotropic(params.classifier_flat(), 0.05).unwrap();
        (params, post)
    }

    #[test]
    fn identity_flow_matches_laplace_exactly() {
        let (params, post) = tiny();
        let mut r = RngStream::new(4, 0);
        let flow = FlowStack::new(
            (0..3)
                .map(|_| RadialLayer::identity(post.sample(&mut r)))
                .collect(),
        )
        .unwrap();
        let cfg = ProbeConfig {
            mc_samples: 256,
            jacobian_samples: 16,
            ..ProbeConfig::default()
        };
        let dir = [0.6, 0.8];
        let rep = asymptotic_confidence_probe(&params, &post, Some(&flow), &dir, &cfg, &r).unwrap();
        assert_eq!(
            rep.flow_confidence.as_ref().unwrap(),
            &rep.laplace_confidence
        );
        assert_eq!(rep.flow_jacobian_max_singular, Some(1.0));
        assert_eq!(rep.flow_cap, Some(rep.cap));
    }

    #[test]
    fn extractor_jacobian_matches_differences() {
        let (params, _) = tiny();
        let x = [0.3, -0.2];
        let j = extractor_jacobian(&params, &x).unwrap();
        let h = 1e-7;
        for c in 0..2 {
            let mut a = x;
            a[c] += h;
            let za = params.features(&a);
            let z = params.features(&x);
            for r in 0..params.feature_dim() {
                assert!(((za[r] - z[r]) / h - j[(r, c)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_multiclass() {
        let params = MlpParams::init(2, &[4], 3, &mut RngStream::new(3, 0));
        let post = GaussianPosterior::isotropic(params.classifier_flat(), 0.05).unwrap();
        let r = asymptotic_confidence_probe(
            &params,
            &post,
            None,
            &[1.0, 0.0],
            &ProbeConfig::default(),
            &RngStream::new(0, 0),
        );
        assert!(r.is_err());
    }
}
