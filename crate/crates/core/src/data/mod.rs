//! Datasets: synthetic blobs, IDX image files, and the far-field NOISE set.

mod idx;
mod manifest;

pub use idx::{encode_idx_images, encode_idx_labels, load_idx, load_idx_images, write_idx};
pub use manifest::{DatasetManifest, ManifestEntry};

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, RngStream};
use crate::{Error, Result};

/// Labeled inputs, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::InvalidArgument("non-finite input".into()));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Rows selected by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Matrix::zeros(indices.len(), self.input_dim());
        for (r, &i) in indices.iter().enumerate() {
            inputs.row_mut(r).copy_from_slice(self.input(i));
        }
        Dataset {
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Concatenates two datasets with the same input dimension.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.input_dim() != other.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: other.input_dim(),
            });
        }
        let mut data = self.inputs.data().to_vec();
        data.extend_from_slice(other.inputs.data());
        let inputs = Matrix::from_vec(self.len() + other.len(), self.input_dim(), data)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(inputs, labels, self.class_count.max(other.class_count))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Class centers for [`gen_blobs`]: scaled simplex vertices when the input
/// has room for them, otherwise a unit circle in the first two coordinates
/// (or evenly spaced points on a line for 1-D input).
pub fn blob_centers(class_count: usize, input_dim: usize) -> Matrix {
    let mut centers = Matrix::zeros(class_count, input_dim);
    if input_dim >= class_count {
        for c in 0..class_count {
            centers[(c, c)] = 1.0;
        }
    } else if input_dim == 1 {
        for c in 0..class_count {
            centers[(c, 0)] = -1.0 + 2.0 * c as f64 / (class_count - 1) as f64;
        }
    } else {
        for c in 0..class_count {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / class_count as f64;
            centers[(c, 0)] = angle.cos();
            centers[(c, 1)] = angle.sin();
        }
    }
    centers
}

/// Isotropic Gaussian blobs with standard deviation `spread` around
/// [`blob_centers`]. Rows are grouped by class.
pub fn gen_blobs(
    class_count: usize,
    per_class: usize,
    input_dim: usize,
    spread: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if class_count < 2 {
        return Err(Error::InvalidArgument(
            "blobs need at least two classes".into(),
        ));
    }
    if input_dim == 0 || spread < 0.0 {
        return Err(Error::InvalidArgument(
            "blobs need input_dim >= 1 and spread >= 0".into(),
        ));
    }
    let centers = blob_centers(class_count, input_dim);
    let n = class_count * per_class;
    let mut inputs = Matrix::zeros(n, input_dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        for i in 0..per_class {
            let row = inputs.row_mut(c * per_class + i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = centers[(c, j)] + spread * rng.standard_normal();
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, class_count)
}

/// Far-from-data OOD probe: `delta · u` with `u` uniform on `[-1, 1]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "NoiseConfig::default_delta")]
    pub delta: f64,
    #[serde(default = "NoiseConfig::default_count")]
    pub count: usize,
    /// Filled from the in-distribution data when omitted in a config file.
    #[serde(default)]
    pub input_dim: usize,
}

impl NoiseConfig {
    fn default_delta() -> f64 {
        2000.0
    }

    fn default_count() -> usize {
        500
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            delta: Self::default_delta(),
            count: Self::default_count(),
            input_dim: 0,
        }
    }
}

/// Unlabeled NOISE inputs; rows of the returned matrix.
pub fn gen_noise(cfg: &NoiseConfig, rng: &mut RngStream) -> Result<Matrix> {
    if !(cfg.delta >= 0.0) {
        return Err(Error::InvalidArgument(
            "noise delta must be non-negative".into(),
        ));
    }
    Ok(Matrix::from_fn(cfg.count, cfg.input_dim, |_, _| {
        cfg.delta * rng.uniform_range(-1.0, 1.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_reproducible() {
        let a = gen_blobs(3, 10, 2, 0.1, &mut RngStream::new(4, 0)).unwrap();
        let b = gen_blobs(3, 10, 2, 0.1, &mut RngStream::new(4, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
    }

    #[test]
    fn zero_spread_collapses_to_centers() {
        let d = gen_blobs(4, 5, 2, 0.0, &mut RngStream::new(1, 0)).unwrap();
        let centers = blob_centers(4, 2);
        for i in 0..d.len() {
            assert_eq!(d.input(i), centers.row(d.labels[i]));
        }
    }

    #[test]
    fn blobs_reject_single_class() {
        assert!(gen_blobs(1, 5, 2, 0.1, &mut RngStream::new(1, 0)).is_err());
    }

    #[test]
    fn simplex_centers_when_room() {
        let c = blob_centers(3, 5);
        assert_eq!(c.row(1), &[0.0, 1.0, 0.0, 0.0, 0.0]);
        let line = blob_centers(3, 1);
        assert_eq!(line.column(0), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_delta_noise_is_zero() {
        let cfg = NoiseConfig {
            delta: 0.0,
            count: 4,
            input_dim: 3,
        };
        let m = gen_noise(&cfg, &mut RngStream::new(0, 0)).unwrap();
        assert!(m.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn noise_magnitudes() {
        let cfg = NoiseConfig {
            delta: 2000.0,
            count: 500,
            input_dim: 4,
        };
        let m = gen_noise(&cfg, &mut RngStream::new(2, 0)).unwrap();
        let inf_norms: Vec<f64> = (0..m.rows())
            .map(|i| m.row(i).iter().fold(0.0_f64, |a, x| a.max(x.abs())))
            .collect();
        assert!(inf_norms.iter().all(|&n| n <= 2000.0));
        let mean = inf_norms.iter().sum::<f64>() / inf_norms.len() as f64;
        assert!(mean >= 1000.0, "mean inf-norm {mean}");
        let again = gen_noise(&cfg, &mut RngStream::new(2, 0)).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn subset_and_concat() {
        let d = gen_blobs(2, 3, 2, 0.1, &mut RngStream::new(3, 0)).unwrap();
        let s = d.subset(&[5, 0]);
        assert_eq!(s.labels, vec![1, 0]);
        assert_eq!(s.input(0), d.input(5));
        let c = s.concat(&s).unwrap();
        assert_eq!(c.len(), 4);
    }
}
