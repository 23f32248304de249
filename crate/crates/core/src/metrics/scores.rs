//! Post-hoc OOD scores. Each function returns its natural quantity; the
//! matching [`Orientation`] says which direction means OOD.

use serde::{Deserialize, Serialize};

use super::detection::Orientation;
use crate::laplace::{mc_predict_batch, ClassifierSampler};
use crate::model::{backward_from_logits, forward, MlpParams};
use crate::numerics::{logsumexp, softmax, Matrix, RngStream};
use crate::{Error, Result};

pub fn msp(logits: &[f64]) -> f64 {
    max(&softmax(logits))
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

pub fn maxlogit(logits: &[f64]) -> f64 {
    max(logits)
}

/// `−T · logsumexp(logits / T)`
pub fn energy(logits: &[f64], temperature: f64) -> f64 {
    if temperature == 1.0 {
        return -logsumexp(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    -temperature * logsumexp(&scaled)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdinConfig {
    pub temperature: f64,
    pub epsilon: f64,
}

impl Default for OdinConfig {
    fn default() -> Self {
        Self {
            temperature: 1000.0,
            epsilon: 0.0014,
        }
    }
}

/// Input after the ODIN step `x − ε · sign(∂ NLL_T / ∂x)` at the predicted label.
pub fn odin_perturb(params: &MlpParams, x: &[f64], cfg: &OdinConfig) -> Result<Vec<f64>> {
    if cfg.epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let trace = forward(params, x)?;
    let t = cfg.temperature;
    let scaled: Vec<f64> = trace.logits.iter().map(|l| l / t).collect();
    let probs = softmax(&scaled);
    let label = crate::model::argmax(&trace.logits);
    let dlogits: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(c, &p)| (p - (c == label) as u8 as f64) / t)
        .collect();
    let grad = backward_from_logits(params, &trace, &dlogits)?.input;
    Ok(x.iter()
        .zip(&grad)
        .map(|(xi, g)| {
            let s = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            xi - cfg.epsilon * s
        })
        .collect())
}

/// Temperature-scaled max softmax at the perturbed input (higher = ID).
pub fn odin(params: &MlpParams, x: &[f64], cfg: &OdinConfig) -> Result<f64> {
    let xp = odin_perturb(params, x, cfg)?;
    let logits = params.logits(&xp);
    if cfg.temperature == 1.0 {
        return Ok(msp(&logits));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    Ok(msp(&scaled))
}

/// Mean softmax over `samples` inverted-dropout masks on the final hidden
/// features. `rate = 0` is the deterministic forward pass.
pub fn mc_dropout_predict(
    params: &MlpParams,
    x: &[f64],
    rate: f64,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(
            "dropout rate must be in [0, 1)".into(),
        ));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be >= 1".into()));
    }
    let z = forward(params, x)?.features().to_vec();
    if rate == 0.0 {
        return Ok(softmax(&params.classifier.apply(&z)));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut acc = vec![0.0; params.class_count()];
    let mut masked = vec![0.0; z.len()];
    for _ in 0..samples {
        for (m, &zi) in masked.iter_mut().zip(&z) {
            *m = if rng.uniform() < rate { 0.0 } else { zi * keep };
        }
        let p = softmax(&params.classifier.apply(&masked));
        acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    acc.iter_mut().for_each(|a| *a /= samples as f64);
    Ok(acc)
}

/// Max of the Monte Carlo predictive for every row of `features` (higher = ID).
pub fn bayes_score(
    sampler: &dyn ClassifierSampler,
    features: &Matrix,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let probs = mc_predict_batch(sampler, features, samples, rng)?;
    Ok((0..probs.rows()).map(|r| max(probs.row(r))).collect())
}

/// OOD scores in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Msp,
    Energy,
    Entropy,
    Maxlogit,
    Odin,
    Mcd,
    Bayes,
    BayesPf,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 8] = [
        ScoreMethod::Msp,
        ScoreMethod::Energy,
        ScoreMethod::Entropy,
        ScoreMethod::Maxlogit,
        ScoreMethod::Odin,
        ScoreMethod::Mcd,
        ScoreMethod::Bayes,
        ScoreMethod::BayesPf,
    ];

    pub fn orientation(self) -> Orientation {
        match self {
            ScoreMethod::Energy | ScoreMethod::Entropy => Orientation::HigherIsOod,
            _ => Orientation::HigherIsId,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreMethod::Msp => "msp",
            ScoreMethod::Energy => "energy",
            ScoreMethod::Entropy => "entropy",
            ScoreMethod::Maxlogit => "maxlogit",
            ScoreMethod::Odin => "odin",
            ScoreMethod::Mcd => "mcd",
            ScoreMethod::Bayes => "bayes",
            ScoreMethod::BayesPf => "bayes_pf",
        }
    }
}
