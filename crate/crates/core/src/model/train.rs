use serde::{Deserialize, Serialize};

use super::mlp::{backward, cross_entropy, forward, MlpParams};
use crate::data::Dataset;
use crate::numerics::RngStream;
use crate::{Error, Result};

/// Mini-batch SGD with heavy-ball momentum and decoupled-from-loss L2 decay
/// (`g ← g + λw`, `v ← μv + g`, `w ← w − ηv`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Overrides `weight_decay` on the classifier when set. The federated
    /// harness uses it to keep MAP training consistent with the Laplace prior.
    pub classifier_weight_decay: Option<f64>,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            classifier_weight_decay: None,
            batch_size: 128,
            local_epochs: 5,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 || self.classifier_weight_decay.is_some_and(|w| w < 0.0) {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Parameter block held fixed during local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freeze {
    #[default]
    None,
    Extractor,
    Classifier,
}

/// Runs `cfg.local_epochs` epochs of SGD over a fresh per-epoch shuffle.
/// Momentum buffers start at zero on every call.
pub fn train_local(
    params: &MlpParams,
    shard: &Dataset,
    cfg: &SgdConfig,
    rng: &mut RngStream,
    freeze: Freeze,
) -> Result<MlpParams> {
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    cfg.validate()?;
    if shard.input_dim() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: shard.input_dim(),
        });
    }
    let mut current = params.clone();
    let mut velocity = params.zeros_like();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let classifier_decay = cfg.classifier_weight_decay.unwrap_or(cfg.weight_decay);

    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = current.zeros_like();
            for &i in batch {
                let trace = forward(&current, shard.input(i))?;
                let g = backward(&current, &trace, shard.labels[i])?;
                grad.add_scaled(1.0, &g.params);
            }
            let scale = 1.0 / batch.len() as f64;
            let n_extractor = current.extractor.len();
            for (idx, ((layer, g), v)) in current
                .layers_mut()
                .zip(grad.layers_mut())
                .zip(velocity.layers_mut())
                .enumerate()
            {
                let is_classifier = idx == n_extractor;
                let frozen = match freeze {
                    Freeze::None => false,
                    Freeze::Extractor => !is_classifier,
                    Freeze::Classifier => is_classifier,
                };
                if frozen {
                    continue;
                }
                let decay = if is_classifier {
                    classifier_decay
                } else {
                    cfg.weight_decay
                };
                sgd_step(
                    layer.weight.data_mut(),
                    g.weight.data(),
                    v.weight.data_mut(),
                    scale,
                    decay,
                    cfg,
                );
                sgd_step(&mut layer.bias, &g.bias, &mut v.bias, scale, decay, cfg);
            }
        }
    }
    Ok(current)
}

fn sgd_step(w: &mut [f64], g: &[f64], v: &mut [f64], scale: f64, decay: f64, cfg: &SgdConfig) {
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let grad = gi * scale + decay * *wi;
        *vi = cfg.momentum * *vi + grad;
        *wi -= cfg.learning_rate * *vi;
    }
}

/// Mean softmax cross-entropy over `data`.
pub fn mean_loss(params: &MlpParams, data: &Dataset) -> f64 {
    let total: f64 = (0..data.len())
        .map(|i| cross_entropy(&params.logits(data.input(i)), data.labels[i]))
        .sum();
    total / data.len() as f64
}

/// Full-batch gradient of [`mean_loss`].
pub fn mean_loss_gradient(params: &MlpParams, data: &Dataset) -> Result<MlpParams> {
    let mut grad = params.zeros_like();
    for i in 0..data.len() {
        let trace = forward(params, data.input(i))?;
        grad.add_scaled(1.0, &backward(params, &trace, data.labels[i])?.params);
    }
    let scale = 1.0 / data.len() as f64;
    for layer in grad.layers_mut() {
        layer.weight.data_mut().iter_mut().for_each(|x| *x *= scale);
        layer.bias.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(grad)
}

pub fn accuracy(params: &MlpParams, data: &Dataset) -> f64 {
    let correct = (0..data.len())
        .filter(|&i| argmax(&params.logits(data.input(i))) == data.labels[i])
        .count();
    correct as f64 / data.len() as f64
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
