use crate::laplace::{ClassifierSampler, GaussianPosterior};
use crate::numerics::{dot, norm, softplus, softplus_inv, Matrix, RngStream};
use crate::{Error, Result};

/// `y = x + β (x − x0) / (α + ‖x − x0‖)` with `α = softplus(alpha_raw)` and
/// `β = softplus(beta_raw) − α`, so `β > −α` for any raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialLayer {
    pub x0: Vec<f64>,
    pub alpha_raw: f64,
    pub beta_raw: f64,
}

/// Per-layer quantities at one input point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerPoint {
    pub r: f64,
    pub h: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LayerPoint {
    /// `1 + βh`
    pub fn a(&self) -> f64 {
        1.0 + self.beta * self.h
    }

    /// `1 + αβh²`, equal to `1 + βh − βrh²`.
    pub fn b(&self) -> f64 {
        1.0 + self.alpha * self.beta * self.h * self.h
    }

    pub fn log_det(&self, dim: usize) -> f64 {
        let bh = self.beta * self.h;
        (dim as f64 - 1.0) * bh.ln_1p() + (self.alpha * bh * self.h).ln_1p()
    }
}

impl RadialLayer {
    /// Layer with `α = 1`, `β = 0` exactly.
    pub fn identity(x0: Vec<f64>) -> Self {
        let raw = softplus_inv(1.0);
        Self {
            x0,
            alpha_raw: raw,
            beta_raw: raw,
        }
    }

    /// Builds a layer from constrained values; needs `α > 0` and `β > −α`.
    pub fn from_constrained(x0: Vec<f64>, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > -alpha) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "radial layer needs alpha > 0 and beta > -alpha, got {alpha}, {beta}"
            )));
        }
        Ok(Self {
            x0,
            alpha_raw: softplus_inv(alpha),
            beta_raw: softplus_inv(alpha + beta),
        })
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn alpha(&self) -> f64 {
        softplus(self.alpha_raw)
    }

    pub fn beta(&self) -> f64 {
        softplus(self.beta_raw) - self.alpha()
    }

    pub(crate) fn point(&self, x: &[f64]) -> (Vec<f64>, LayerPoint) {
        let d: Vec<f64> = x.iter().zip(&self.x0).map(|(a, b)| a - b).collect();
        let r = norm(&d);
        let alpha = self.alpha();
        let beta = self.beta();
        (
            d,
            LayerPoint {
                r,
                h: 1.0 / (alpha + r),
                alpha,
                beta,
            },
        )
    }

    /// Returns `(y, log|det J|)`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let (d, pt) = self.point(x);
        let bh = pt.beta * pt.h;
        let y = x.iter().zip(&d).map(|(xi, di)| xi + bh * di).collect();
        (y, pt.log_det(x.len()))
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = y.iter().zip(&self.x0).map(|(a, b)| a - b).collect();
        let s = norm(&e);
        if s == 0.0 {
            return self.x0.clone();
        }
        let alpha = self.alpha();
        let beta = self.beta();
        if beta == 0.0 {
            return y.to_vec();
        }
        let c = alpha + beta - s;
        let disc = (c * c + 4.0 * alpha * s).sqrt();
        // Positive root of r² + c r − αs = 0, in whichever form avoids cancellation.
        let r = if c > 0.0 {
            2.0 * alpha * s / (c + disc)
        } else {
            (disc - c) / 2.0
        };
        let scale = r / s;
        self.x0
            .iter()
            .zip(&e)
            .map(|(x0, ei)| x0 + ei * scale)
            .collect()
    }

    /// `J = (1 + βh) I − βh² d dᵀ / r`
    pub fn jacobian(&self, x: &[f64]) -> Matrix {
        let (d, pt) = self.point(x);
        let p = x.len();
        let mut j = Matrix::identity(p).scaled(pt.a());
        if pt.r > 0.0 {
            let c = -pt.beta * pt.h * pt.h / pt.r;
            j.add_outer_assign(c, &d, &d).expect("square");
        }
        j
    }
}

/// Composition `T_L ∘ … ∘ T_1`; the empty stack is the identity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowStack {
    pub layers: Vec<RadialLayer>,
}

impl FlowStack {
    pub fn new(layers: Vec<RadialLayer>) -> Result<Self> {
        if let Some(first) = layers.first() {
            let p = first.dim();
            if let Some(bad) = layers.iter().find(|l| l.dim() != p) {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    actual: bad.dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// `length` identity layers centred on draws from `base`.
    pub fn init_from_base(base: &GaussianPosterior, length: usize, rng: &mut RngStream) -> Self {
        let layers = (0..length)
            .map(|_| RadialLayer::identity(base.sample(rng)))
            .collect();
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.layers.first().map(RadialLayer::dim)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        match self.dim() {
            Some(p) if p != x.len() => Err(Error::DimensionMismatch {
                expected: p,
                actual: x.len(),
            }),
            _ => Ok(()),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(x)?;
        let mut y = x.to_vec();
        let mut log_det = 0.0;
        for layer in &self.layers {
            let (next, ld) = layer.forward(&y);
            y = next;
            log_det += ld;
        }
        Ok((y, log_det))
    }

    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        let mut x = y.to_vec();
        for layer in self.layers.iter().rev() {
            x = layer.inverse(&x);
        }
        Ok(x)
    }

    /// Jacobian of the whole stack at `x`.
    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        self.check(x)?;
        let mut j = Matrix::identity(x.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            j = layer.jacobian(&cur).matmul(&j)?;
            cur = layer.forward(&cur).0;
        }
        Ok(j)
    }

    /// `log N(T⁻¹(φ); μ, Σ) − log|det J_T(T⁻¹(φ))|`
    pub fn pushforward_log_density(&self, base: &GaussianPosterior, phi: &[f64]) -> Result<f64> {
        if phi.len() != base.dim() {
            return Err(Error::DimensionMismatch {
                expected: base.dim(),
                actual: phi.len(),
            });
        }
        let x = self.inverse(phi)?;
        let (_, log_det) = self.forward(&x)?;
        Ok(base.log_density(&x) - log_det)
    }

    /// `Σ_l |β_l|`. Each layer moves a point by less than its `|β|`.
    pub fn total_abs_beta(&self) -> f64 {
        self.layers.iter().map(|l| l.beta().abs()).sum()
    }

    /// Raw parameters in layer order: `x0`, `alpha_raw`, `beta_raw`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.x0);
            out.push(l.alpha_raw);
            out.push(l.beta_raw);
        }
        out
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for v in l.x0.iter_mut() {
                *v = it.next().expect("length checked by caller");
            }
            l.alpha_raw = it.next().expect("length checked by caller");
            l.beta_raw = it.next().expect("length checked by caller");
        }
    }
}

/// Samples `T(x)` with `x` drawn from the base Gaussian. Consumes the RNG
/// exactly as the base does, so an identity stack reproduces base draws.
pub struct FlowPosterior<'a> {
    pub base: &'a GaussianPosterior,
    pub flow: &'a FlowStack,
}

impl ClassifierSampler for FlowPosterior<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let x = self.base.sample(rng);
        if self.flow.is_empty() {
            return x;
        }
        self.flow.forward(&x).expect("flow matches base dim").0
    }
}

/// Gradient of the per-sample loss `−log|det J_T(x)| − log p*(T(x))` with
/// respect to the flattened raw flow parameters, given `∂/∂y` of the target
/// term at `y = T(x)`. Returns the gradient in [`FlowStack::flatten`] order.
pub(crate) fn backprop_sample(stack: &FlowStack, x: &[f64], target_grad_y: &[f64]) -> Vec<f64> {
    let p = x.len();
    let mut inputs = Vec::with_capacity(stack.len());
    let mut cur = x.to_vec();
    for layer in &stack.layers {
        inputs.push(cur.clone());
        cur = layer.forward(&cur).0;
    }

    let stride = p + 2;
    let mut grad = vec![0.0; stride * stack.len()];
    let mut gy: Vec<f64> = target_grad_y.to_vec();
    let pm1 = p as f64 - 1.0;
    for (l, layer) in stack.layers.iter().enumerate().rev() {
        let (d, pt) = layer.point(&inputs[l]);
        let (a, b) = (pt.a(), pt.b());
        let (h, beta, alpha) = (pt.h, pt.beta, pt.alpha);
        let dg = dot(&d, &gy);

        // Through y = x + βh d.
        let mut gx: Vec<f64> = gy.iter().map(|g| a * g).collect();
        if pt.r > 0.0 {
            let c = -beta * h * h * dg / pt.r;
            gx.iter_mut().zip(&d).for_each(|(g, di)| *g += c * di);
        }
        let mut g_alpha = -beta * h * h * dg;
        let mut g_beta = h * dg;

        // Through −log|det|.
        let dl_dr = -pm1 * beta * h * h / a - 2.0 * alpha * beta * h * h * h / b;
        let dl_dalpha =
            -pm1 * beta * h * h / a + (beta * h * h - 2.0 * alpha * beta * h * h * h) / b;
        let dl_dbeta = pm1 * h / a + alpha * h * h / b;
        g_alpha -= dl_dalpha;
        g_beta -= dl_dbeta;
        let slot = &mut grad[l * stride..(l + 1) * stride];
        let mut g_x0: Vec<f64> = gx.iter().zip(&gy).map(|(gxi, gyi)| -(gxi - gyi)).collect();
        if pt.r > 0.0 {
            let c = dl_dr / pt.r;
            for ((g0i, gxi), di) in g_x0.iter_mut().zip(gx.iter_mut()).zip(&d) {
                *gxi -= c * di;
                *g0i += c * di;
            }
        }
        slot[..p].copy_from_slice(&g_x0);
        let sa = crate::numerics::sigmoid(layer.alpha_raw);
        let sb = crate::numerics::sigmoid(layer.beta_raw);
        slot[p] = sa * (g_alpha - g_beta);
        slot[p + 1] = sb * g_beta;
        gy = gx;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cholesky, symmetric_eigenvalues};

    fn random_layer(p: usize, rng: &mut RngStream) -> RadialLayer {
        RadialLayer {
            x0: rng.normal_vec(p),
            alpha_raw: rng.standard_normal(),
            beta_raw: 2.0 * rng.standard_normal(),
        }
    }

    fn random_stack(p: usize, l: usize, rng: &mut RngStream) -> FlowStack {
        FlowStack::new((0..l).map(|_| random_layer(p, rng)).collect()).unwrap()
    }

    fn numeric_jacobian(s: &FlowStack, x: &[f64]) -> Matrix {
        let p = x.len();
        let h = 1e-6;
        let mut j = Matrix::zeros(p, p);
        for c in 0..p {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[c] += h;
            b[c] -= h;
            let ya = s.forward(&a).unwrap().0;
            let yb = s.forward(&b).unwrap().0;
            for r in 0..p {
                j[(r, c)] = (ya[r] - yb[r]) / (2.0 * h);
            }
        }
        j
    }

    fn log_abs_det(m: &Matrix) -> f64 {
        // |det M| = sqrt(det MᵀM)
        let mtm = m.transpose().matmul(m).unwrap();
        0.5 * cholesky(&mtm).unwrap().log_det()
    }

    #[test]
    fn identity_layer_is_exact() {
        let l = RadialLayer::identity(vec![0.3, -1.0]);
        assert_eq!(l.alpha(), 1.0);
        assert_eq!(l.beta(), 0.0);
        let x = [2.5, 7.0];
        let (y, ld) = l.forward(&x);
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
        assert_eq!(l.inverse(&x), x);
    }

    #[test]
    fn hand_evaluated_layer() {
        let l = RadialLayer::from_constrained(vec![0.0, 0.0], 1.0, 1.0).unwrap();
        let (y, _) = l.forward(&[1.0, 0.0]);
        assert!((y[0] - 1.5).abs() < 1e-12 && y[1] == 0.0);
    }

    #[test]
    fn inverse_of_center_is_center() {
        let mut rng = RngStream::new(1, 0);
        let l = random_layer(3, &mut rng);
        assert_eq!(l.inverse(&l.x0), l.x0);
    }

    #[test]
    fn log_det_matches_numeric_jacobian() {
        let mut rng = RngStream::new(2, 0);
        for _ in 0..50 {
            let p = 1 + rng.index(6);
            let s = random_stack(p, 1 + rng.index(3), &mut rng);
            let x = rng.normal_vec(p);
            let (_, ld) = s.forward(&x).unwrap();
            let num = log_abs_det(&numeric_jacobian(&s, &x));
            assert!((ld - num).abs() < 1e-5, "{ld} vs {num}");
            let exact = log_abs_det(&s.jacobian(&x).unwrap());
            assert!((ld - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip_deep_stack() {
        let mut rng = RngStream::new(3, 0);
        let s = random_stack(5, 10, &mut rng);
        for _ in 0..100 {
            let y: Vec<f64> = rng.normal_vec(5).iter().map(|v| 3.0 * v).collect();
            let back = s.forward(&s.inverse(&y).unwrap()).unwrap().0;
            let err = back
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn layer_jacobian_is_symmetric_with_known_spectrum() {
        let mut rng = RngStream::new(4, 0);
        let l = random_layer(4, &mut rng);
        let x = rng.normal_vec(4);
        let j = l.jacobian(&x);
        assert!(j.is_symmetric(1e-14));
        let (_, pt) = l.point(&x);
        let ev = symmetric_eigenvalues(&j);
        let mut want = [pt.a(), pt.a(), pt.a(), pt.b()];
        want.sort_by(f64::total_cmp);
        for (e, w) in ev.iter().zip(want) {
            assert!((e - w).abs() < 1e-12);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = RngStream::new(5, 0);
        let p = 3;
        let s = random_stack(p, 3, &mut rng);
        let x = rng.normal_vec(p);
        let target = |y: &[f64]| -> (f64, Vec<f64>) {
            // log p*(y) = −½‖y − c‖² − 0.1 Σ y⁴
            let c = [1.0, -0.5, 0.25];
            let v = y
                .iter()
                .zip(c)
                .map(|(a, b)| -0.5 * (a - b) * (a - b) - 0.1 * a.powi(4))
                .sum();
            let g = y
                .iter()
                .zip(c)
                .map(|(a, b)| -(a - b) - 0.4 * a.powi(3))
                .collect();
            (v, g)
        };
        let loss = |st: &FlowStack| {
            let (y, ld) = st.forward(&x).unwrap();
            -ld - target(&y).0
        };
        let (y, _) = s.forward(&x).unwrap();
        let gy: Vec<f64> = target(&y).1.iter().map(|g| -g).collect();
        let analytic = backprop_sample(&s, &x, &gy);
        let flat = s.flatten();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut a = s.clone();
            let mut b = s.clone();
            let mut fa = flat.clone();
            let mut fb = flat.clone();
            fa[i] += h;
            fb[i] -= h;
            a.unflatten_into(&fa);
            b.unflatten_into(&fb);
            let num = (loss(&a) - loss(&b)) / (2.0 * h);
            let tol = 1e-6 * (1.0 + num.abs());
            assert!(
                (analytic[i] - num).abs() < tol,
                "param {i}: {} vs {num}",
                analytic[i]
            );
        }
    }
}
