use serde::{Deserialize, Serialize};

use super::radial::{backprop_sample, FlowStack};
use super::target::LogDensity;
use crate::laplace::GaussianPosterior;
use crate::numerics::RngStream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    /// Number of radial layers `L`.
    pub flow_length: usize,
    pub steps: usize,
    pub mc_batch: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Also fine-tune after every communication round, warm-starting from the
    /// previous round's flow. Off by default: fine-tuning runs once at the end.
    pub every_round: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            flow_length: 10,
            steps: 500,
            mc_batch: 32,
            step_size: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            every_round: false,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.mc_batch == 0 {
            return Err(Error::InvalidArgument(
                "steps and mc_batch must be >= 1".into(),
            ));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument("step_size must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument(
                "Adam betas must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub flow: FlowStack,
    /// Mini-batch estimate of the objective before each update.
    pub losses: Vec<f64>,
}

/// Reverse-KL fine-tuning of a radial stack on top of a frozen Gaussian base.
///
/// Minimizes `E_x[−log|det J_T(x)| − log p*(T(x))]`, `x ∼ base`, with
/// reparameterized gradients and Adam. Layer centres are drawn from the base
/// first, then each step draws `mc_batch` base samples.
pub fn fine_tune(
    base: &GaussianPosterior,
    target: &dyn LogDensity,
    cfg: &FineTuneConfig,
    rng: &mut RngStream,
) -> Result<FineTuneOutcome> {
    let flow = FlowStack::init_from_base(base, cfg.flow_length, rng);
    fine_tune_from(base, target, cfg, flow, rng)
}

/// [`fine_tune`] starting from an existing stack instead of a fresh one.
pub fn fine_tune_from(
    base: &GaussianPosterior,
    target: &dyn LogDensity,
    cfg: &FineTuneConfig,
    mut flow: FlowStack,
    rng: &mut RngStream,
) -> Result<FineTuneOutcome> {
    cfg.validate()?;
    if target.dim() != base.dim() {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            actual: target.dim(),
        });
    }
    if flow.dim().is_some_and(|p| p != base.dim()) {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            actual: flow.dim().unwrap_or(0),
        });
    }
    let mut theta = flow.flatten();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut losses = Vec::with_capacity(cfg.steps);
    let inv_batch = 1.0 / cfg.mc_batch as f64;

    for step in 0..cfg.steps {
        let mut grad = vec![0.0; theta.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.mc_batch {
            let x = base.sample(rng);
            let (y, log_det) = flow.forward(&x)?;
            let (lp, g) = target.log_density_and_grad(&y);
            loss += -log_det - lp;
            if theta.is_empty() {
                continue;
            }
            let gy: Vec<f64> = g.iter().map(|v| -v).collect();
            let gs = backprop_sample(&flow, &x, &gy);
            grad.iter_mut().zip(gs).for_each(|(a, b)| *a += b);
        }
        loss *= inv_batch;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(loss);

        let t = (step + 1) as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..theta.len() {
            let g = grad[i] * inv_batch;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            theta[i] -= cfg.step_size * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
        }
        flow.unflatten_into(&theta);
    }
    Ok(FineTuneOutcome { flow, losses })
}
