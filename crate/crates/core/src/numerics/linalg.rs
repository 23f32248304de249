use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::{Error, Result};

/// Pivots at or below this value are treated as a loss of definiteness.
pub const PIVOT_FLOOR: f64 = 1e-300;

/// Diagonal jitter added on the single permitted retry.
pub const CHOLESKY_JITTER: f64 = 1e-8;

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
///
/// The all-zero factor is allowed through [`SpdFactor::zero`] and stands for a
/// point mass when used as a covariance factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdFactor {
    lower: Matrix,
}

impl SpdFactor {
    /// Degenerate factor of a zero covariance.
    pub fn zero(dim: usize) -> Self {
        Self {
            lower: Matrix::zeros(dim, dim),
        }
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower.diagonal().iter().any(|&d| d <= 0.0)
    }

    /// `L Lᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let l = &self.lower;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let s = dot(&l.row(i)[..=j], &l.row(j)[..=j]);
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    /// `log det(L Lᵀ)`
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L · z`
    pub fn mul_lower(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| dot(&self.lower.row(i)[..=i], &z[..=i]))
            .collect()
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let l = &self.lower;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s = b[i] - dot(&l.row(i)[..i], &y[..i]);
            y[i] = s / l[(i, i)];
        }
        y
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let l = &self.lower;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            x[i] /= l[(i, i)];
            let xi = x[i];
            for k in 0..i {
                x[k] -= l[(i, k)] * xi;
            }
        }
        x
    }

    /// Solves `L Lᵀ x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `(L Lᵀ)⁻¹`, symmetrized.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv.symmetrize();
        inv
    }
}

/// Cholesky factorization of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<SpdFactor> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            actual: a.cols(),
        });
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let pivot = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(pivot > PIVOT_FLOOR) {
            return Err(Error::NotPositiveDefinite { row: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / d;
        }
    }
    Ok(SpdFactor { lower: l })
}

/// [`cholesky`] with one retry on `A + 1e-8·I`.
pub fn cholesky_with_jitter(a: &Matrix) -> Result<SpdFactor> {
    match cholesky(a) {
        Ok(f) => Ok(f),
        Err(Error::NotPositiveDefinite { .. }) => {
            let mut jittered = a.clone();
            jittered.add_diagonal_assign(CHOLESKY_JITTER);
            cholesky(&jittered)
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    /// NaN when the input is not square and symmetric.
    pub min_eigenvalue: f64,
    pub min_singular: f64,
    pub max_singular: f64,
}

impl SpectralSummary {
    pub fn has_eigenvalue(&self) -> bool {
        !self.min_eigenvalue.is_nan()
    }
}

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    assert!(a.is_square());
    let n = a.rows();
    let mut m = a.clone();
    m.symmetrize();
    let total = m.frobenius_norm();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig = m.diagonal();
    eig.sort_by(f64::total_cmp);
    eig
}

/// Singular values, descending.
///
/// One-sided (Hestenes) Jacobi: rotations orthogonalize the columns, which
/// diagonalizes `aᵀa` without ever forming it, so small singular values keep
/// their relative accuracy.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let work = if a.rows() >= a.cols() {
        a.clone()
    } else {
        a.transpose()
    };
    let (m, n) = (work.rows(), work.cols());
    // Column-major copy for cheap column access.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| work.column(j)).collect();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                let cp = &mut left[p];
                let cq = &mut right[0];
                for k in 0..m {
                    let x = cp[k];
                    let y = cq[k];
                    cp[k] = c * x - s * y;
                    cq[k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Extreme singular values of `a` and, for square symmetric input, its
/// smallest eigenvalue.
pub fn spectral_summary(a: &Matrix) -> SpectralSummary {
    let sv = singular_values(a);
    let min_eigenvalue = if a.is_symmetric(1e-12) {
        symmetric_eigenvalues(a)
            .first()
            .copied()
            .unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    SpectralSummary {
        min_eigenvalue,
        min_singular: sv.last().copied().unwrap_or(0.0),
        max_singular: sv.first().copied().unwrap_or(0.0),
    }
}

/// Shift-stabilized `log Σ exp(vᵢ)`.
pub fn logsumexp(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "logsumexp of an empty vector");
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = logsumexp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}
