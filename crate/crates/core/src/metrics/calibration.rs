use serde::{Deserialize, Serialize};

use crate::model::argmax;
use crate::numerics::Matrix;
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 15;

/// Predictive distributions with their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    probabilities: Matrix,
    labels: Vec<usize>,
    logits: Option<Matrix>,
}

impl PredictionBatch {
    pub fn new(probabilities: Matrix, labels: Vec<usize>, logits: Option<Matrix>) -> Result<Self> {
        if labels.len() != probabilities.rows() {
            return Err(Error::DimensionMismatch {
                expected: probabilities.rows(),
                actual: labels.len(),
            });
        }
        let k = probabilities.cols();
        for (r, &label) in labels.iter().enumerate() {
            let row = probabilities.row(r);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "row {r} is not a probability vector (sum {sum})"
                )));
            }
            if label >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {label} out of range"
                )));
            }
        }
        if let Some(l) = &logits {
            if l.rows() != probabilities.rows() || l.cols() != k {
                return Err(Error::DimensionMismatch {
                    expected: probabilities.rows(),
                    actual: l.rows(),
                });
            }
        }
        Ok(Self {
            probabilities,
            labels,
            logits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn probabilities(&self) -> &Matrix {
        &self.probabilities
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn logits(&self) -> Option<&Matrix> {
        self.logits.as_ref()
    }

    /// `(max probability, prediction is correct)` per row.
    pub fn confidences(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        (0..self.len()).map(|r| {
            let row = self.probabilities.row(r);
            let pred = argmax(row);
            (row[pred], pred == self.labels[r])
        })
    }
}

pub fn accuracy(batch: &PredictionBatch) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.confidences().filter(|&(_, ok)| ok).count() as f64 / batch.len() as f64
}

/// Mean negative log-probability of the true label, clipped at `1e-12`.
pub fn nll(batch: &PredictionBatch) -> f64 {
    let total: f64 = (0..batch.len())
        .map(|r| -batch.probabilities.row(r)[batch.labels[r]].max(1e-12).ln())
        .sum();
    total / batch.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    /// Mean confidence; 0 for an empty bin.
    pub confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityDiagram {
    pub bins: Vec<ReliabilityBin>,
}

/// Bin of `c` among `bins` equal-width intervals `(lo, hi]`; 0 goes to the first.
pub fn bin_index(c: f64, bins: usize) -> usize {
    let edge = |b: usize| b as f64 / bins as f64;
    let mut b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
    while b > 0 && c <= edge(b) {
        b -= 1;
    }
    while b + 1 < bins && c > edge(b + 1) {
        b += 1;
    }
    b
}

pub fn reliability_diagram(batch: &PredictionBatch, bins: usize) -> ReliabilityDiagram {
    let bins = bins.max(1);
    let mut conf = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for (c, ok) in batch.confidences() {
        let b = bin_index(c, bins);
        conf[b] += c;
        correct[b] += ok as usize;
        count[b] += 1;
    }
    let bins = (0..bins)
        .map(|b| {
            let n = count[b];
            let (confidence, accuracy) = if n == 0 {
                (0.0, 0.0)
            } else {
                (conf[b] / n as f64, correct[b] as f64 / n as f64)
            };
            ReliabilityBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                confidence,
                accuracy,
                count: n,
            }
        })
        .collect();
    ReliabilityDiagram { bins }
}

/// `Σ_b (n_b / n) |acc_b − conf_b|`
pub fn ece(batch: &PredictionBatch, bins: usize) -> f64 {
    let n = batch.len();
    if n == 0 {
        return 0.0;
    }
    reliability_diagram(batch, bins)
        .bins
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[[f64; 2]], labels: &[usize]) -> PredictionBatch {
        let m = Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        PredictionBatch::new(m, labels.to_vec(), None).unwrap()
    }

    #[test]
    fn ece_hand_cases() {
        let b = batch(&[[0.2, 0.8]], &[1]);
        assert!((ece(&b, 15) - 0.2).abs() < 1e-15);
        let b = batch(&[[1.0, 0.0], [1.0, 0.0]], &[0, 1]);
        assert_eq!(ece(&b, 15), 0.5);
    }

    #[test]
    fn calibrated_bin_has_zero_ece() {
        // Two predictions at 0.5 confidence, one right.
        let b = batch(&[[0.5, 0.5], [0.5, 0.5]], &[0, 1]);
        assert_eq!(ece(&b, 15), 0.0);
    }

    #[test]
    fn nll_hand_cases() {
        let b = batch(&[[0.5, 0.5], [0.75, 0.25]], &[0, 1]);
        assert!((nll(&b) - 1.5 * 2f64.ln()).abs() < 1e-15);
        let b = batch(&[[1.0, 0.0]], &[0]);
        assert_eq!(nll(&b), 0.0);
        let uniform = Matrix::from_fn(1, 10, |_, _| 0.1);
        let u = PredictionBatch::new(uniform, vec![3], None).unwrap();
        assert!((nll(&u) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(0.0, 15), 0);
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(0.8, 15), 11);
        assert_eq!(bin_index(12.0 / 15.0, 15), 11);
        assert_eq!(bin_index(1.0 / 15.0, 15), 0);
        assert_eq!(bin_index(1.0 / 15.0 + 1e-12, 15), 1);
    }

    #[test]
    fn invalid_rows_rejected() {
        let m = Matrix::from_rows(&[vec![0.6, 0.6]]);
        assert!(PredictionBatch::new(m, vec![0], None).is_err());
    }
}
