use serde::{Deserialize, Serialize};

use crate::numerics::{axpy, dot, softmax, Matrix, RngStream};
use crate::{Error, Result};

/// Fully connected layer, `y = W x + b` with `W` shaped `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Uniform in `±√(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weight = Matrix::from_fn(output, input, |_, _| rng.uniform_range(-limit, limit));
        Self {
            weight,
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.output_dim())
            .map(|i| dot(self.weight.row(i), x) + self.bias[i])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Weight rows concatenated row-major, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(&self.bias);
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(flat: &[f64], input: usize, output: usize) -> Result<Self> {
        let expected = input * output + output;
        if flat.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: flat.len(),
            });
        }
        let weight = Matrix::from_vec(output, input, flat[..input * output].to_vec())?;
        Ok(Self {
            weight,
            bias: flat[input * output..].to_vec(),
        })
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// ReLU feature extractor followed by a linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub extractor: Vec<DenseLayer>,
    pub classifier: DenseLayer,
}

impl MlpParams {
    /// Glorot-initialized network with the given hidden widths.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        class_count: usize,
        rng: &mut RngStream,
    ) -> Self {
        let mut extractor = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &h in hidden {
            extractor.push(DenseLayer::glorot(fan_in, h, rng));
            fan_in = h;
        }
        let classifier = DenseLayer::glorot(fan_in, class_count, rng);
        Self {
            extractor,
            classifier,
        }
    }

    /// Same shapes as `self`, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            extractor: self
                .extractor
                .iter()
                .map(|l| DenseLayer::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            classifier: DenseLayer::zeros(
                self.classifier.input_dim(),
                self.classifier.output_dim(),
            ),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor
            .first()
            .map_or(self.classifier.input_dim(), DenseLayer::input_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.output_dim()
    }

    /// Number of flattened classifier parameters, `d·k + k`.
    pub fn classifier_dim(&self) -> usize {
        self.classifier.param_count()
    }

    pub fn classifier_flat(&self) -> Vec<f64> {
        self.classifier.flatten()
    }

    pub fn set_classifier_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.classifier = DenseLayer::unflatten(flat, self.feature_dim(), self.class_count())?;
        Ok(())
    }

    /// All layers in order, the classifier last.
    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.classifier))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
    }

    pub fn validate(&self) -> Result<()> {
        let mut fan_in = self.input_dim();
        for layer in self.layers() {
            if layer.input_dim() != fan_in {
                return Err(Error::DimensionMismatch {
                    expected: fan_in,
                    actual: layer.input_dim(),
                });
            }
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: layer.output_dim(),
                    actual: layer.bias.len(),
                });
            }
            if !layer.is_finite() {
                return Err(Error::InvalidArgument(
                    "non-finite network parameter".into(),
                ));
            }
            fan_in = layer.output_dim();
        }
        Ok(())
    }

    /// Extractor output `z = f(x)`.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.extractor {
            h = layer.apply(&h);
            relu_in_place(&mut h);
        }
        h
    }

    /// Feature matrix for every row of `inputs`.
    pub fn feature_matrix(&self, inputs: &Matrix) -> Matrix {
        let d = self.feature_dim();
        let mut out = Matrix::zeros(inputs.rows(), d);
        for i in 0..inputs.rows() {
            out.row_mut(i)
                .copy_from_slice(&self.features(inputs.row(i)));
        }
        out
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.classifier.apply(&self.features(x))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// `self += s · other`, parameter-wise.
    pub fn add_scaled(&mut self, s: f64, other: &MlpParams) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            axpy(s, b.weight.data(), a.weight.data_mut());
            axpy(s, &b.bias, &mut a.bias);
        }
    }

    pub fn flatten_all(&self) -> Vec<f64> {
        self.layers().flat_map(DenseLayer::flatten).collect()
    }
}

/// Logits of the linear classifier given its flattened parameters.
pub fn classifier_logits(flat: &[f64], features: &[f64], class_count: usize) -> Vec<f64> {
    let d = features.len();
    debug_assert_eq!(flat.len(), d * class_count + class_count);
    let bias = &flat[d * class_count..];
    (0..class_count)
        .map(|i| dot(&flat[i * d..(i + 1) * d], features) + bias[i])
        .collect()
}

#[inline]
fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x <= 0.0 {
            *x = 0.0;
        }
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Per extractor layer, before ReLU.
    pub pre_activations: Vec<Vec<f64>>,
    /// Per extractor layer, after ReLU.
    pub activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn features(&self) -> &[f64] {
        self.activations.last().unwrap_or(&self.input)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

pub fn forward(params: &MlpParams, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    let mut pre_activations = Vec::with_capacity(params.extractor.len());
    let mut activations = Vec::with_capacity(params.extractor.len());
    let mut h = x.to_vec();
    for layer in &params.extractor {
        let pre = layer.apply(&h);
        let mut act = pre.clone();
        relu_in_place(&mut act);
        pre_activations.push(pre);
        h = act.clone();
        activations.push(act);
    }
    let logits = params.classifier.apply(&h);
    Ok(ForwardTrace {
        input: x.to_vec(),
        pre_activations,
        activations,
        logits,
    })
}

/// Parameter gradients plus the gradient with respect to the input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: MlpParams,
    pub input: Vec<f64>,
}

/// Gradients of softmax cross-entropy at `label`.
pub fn backward(params: &MlpParams, trace: &ForwardTrace, label: usize) -> Result<Gradients> {
    if label >= params.class_count() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            params.class_count()
        )));
    }
    let mut dlogits = trace.probabilities();
    dlogits[label] -= 1.0;
    backward_from_logits(params, trace, &dlogits)
}

/// Backpropagates an arbitrary upstream gradient on the logits.
pub fn backward_from_logits(
    params: &MlpParams,
    trace: &ForwardTrace,
    dlogits: &[f64],
) -> Result<Gradients> {
    if dlogits.len() != params.class_count() {
        return Err(Error::DimensionMismatch {
            expected: params.class_count(),
            actual: dlogits.len(),
        });
    }
    let mut grads = params.zeros_like();
    let features = trace.features();
    grads
        .classifier
        .weight
        .add_outer_assign(1.0, dlogits, features)?;
    grads.classifier.bias.copy_from_slice(dlogits);
    let mut upstream = params.classifier.weight.tr_matvec(dlogits)?;

    for l in (0..params.extractor.len()).rev() {
        // ReLU subgradient at 0 is 0.
        let dpre: Vec<f64> = upstream
            .iter()
            .zip(&trace.pre_activations[l])
            .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
            .collect();
        let layer_input = if l == 0 {
            &trace.input
        } else {
            &trace.activations[l - 1]
        };
        grads.extractor[l]
            .weight
            .add_outer_assign(1.0, &dpre, layer_input)?;
        grads.extractor[l].bias.copy_from_slice(&dpre);
        upstream = params.extractor[l].weight.tr_matvec(&dpre)?;
    }
    Ok(Gradients {
        params: grads,
        input: upstream,
    })
}

/// Softmax cross-entropy of `logits` at `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    crate::numerics::logsumexp(logits) - logits[label]
}

/// First-order expansion of the logits in the flattened classifier parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub logits_at_mean: Vec<f64>,
    /// `k × (d·k + k)`
    pub jacobian: Matrix,
}

impl Linearization {
    /// Reduces a binary problem to the margin `logit₁ − logit₀` and its
    /// Jacobian row.
    pub fn binary_margin(&self) -> Result<(f64, Vec<f64>)> {
        if self.logits_at_mean.len() != 2 {
            return Err(Error::InvalidArgument(
                "margin reduction needs exactly two classes".into(),
            ));
        }
        let f = self.logits_at_mean[1] - self.logits_at_mean[0];
        let j = self
            .jacobian
            .row(1)
            .iter()
            .zip(self.jacobian.row(0))
            .map(|(a, b)| a - b)
            .collect();
        Ok((f, j))
    }
}

/// Exact Jacobian of the logits with respect to the flattened classifier.
pub fn linearize_classifier(params: &MlpParams, x: &[f64]) -> Result<Linearization> {
    let trace = forward(params, x)?;
    Ok(linearize_at_features(params, trace.features()))
}

pub fn linearize_at_features(params: &MlpParams, features: &[f64]) -> Linearization {
    let k = params.class_count();
    let d = params.feature_dim();
    let mut jacobian = Matrix::zeros(k, d * k + k);
    for i in 0..k {
        jacobian.row_mut(i)[i * d..(i + 1) * d].copy_from_slice(features);
        jacobian[(i, d * k + i)] = 1.0;
    }
    Linearization {
        logits_at_mean: params.classifier.apply(features),
        jacobian,
    }
}
