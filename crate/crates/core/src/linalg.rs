//! Small dense linear-algebra helpers shared by the kernel, Harnack and
//! control modules: PSD square roots and range-restricted least squares.

use nalgebra::{DMatrix, DVector};

use crate::error::{MehlerError, Result};

/// Relative threshold below which eigenvalues of a PSD matrix are treated as zero.
pub const TAU_SVD: f64 = 1e-10;
/// Relative residual above which a vector is declared outside a range.
pub const TAU_RANGE: f64 = 1e-6;
/// Negative eigenvalues down to `-PSD_CLAMP * ||R||` are clamped to zero.
pub const PSD_CLAMP: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Symmetry defect relative to the matrix scale.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    frobenius(&(m - m.transpose()))
}

/// Eigen-decomposition of a symmetric PSD matrix with small negative
/// eigenvalues clamped to zero.
#[derive(Debug, Clone)]
pub struct PsdEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl PsdEigen {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(MehlerError::Domain(format!(
                "expected square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(MehlerError::Domain("matrix has non-finite entries".into()));
        }
        let dim = m.nrows();
        if dim == 0 {
            return Ok(Self {
                values: DVector::zeros(0),
                vectors: DMatrix::zeros(0, 0),
            });
        }
        let eig = symmetrize(m).symmetric_eigen();
        let scale = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let mut values = eig.eigenvalues.clone();
        for v in values.iter_mut() {
            if *v < 0.0 {
                if *v < -PSD_CLAMP * scale {
                    return Err(MehlerError::Domain(format!(
                        "matrix is not positive semidefinite (eigenvalue {v:e}, scale {scale:e})"
                    )));
                }
                *v = 0.0;
            }
        }
        Ok(Self {
            values,
            vectors: eig.eigenvectors,
        })
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |acc, v| acc.max(*v))
    }

    /// `V f(Λ) Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mapped = self.values.map(f);
        &self.vectors * DMatrix::from_diagonal(&mapped) * self.vectors.transpose()
    }

    pub fn sqrt(&self) -> DMatrix<f64> {
        self.map(f64::sqrt)
    }

    /// Pseudo-inverse of the square root, dropping eigenvalues below `TAU_SVD * λ_max`.
    pub fn pinv_sqrt(&self) -> DMatrix<f64> {
        let cut = TAU_SVD * self.max_value();
        self.map(|v| if v > cut && v > 0.0 { 1.0 / v.sqrt() } else { 0.0 })
    }

    pub fn rank(&self) -> usize {
        let cut = TAU_SVD * self.max_value();
        self.values.iter().filter(|v| **v > cut && **v > 0.0).count()
    }
}

/// Square root of a PSD matrix with clamping.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(PsdEigen::new(m)?.sqrt())
}

/// Solves `Q^{1/2} w = y` in the least-squares sense and reports `|w|`, or
/// `+∞` when `y` is not in the range of `Q^{1/2}` at relative threshold `tau`.
#[derive(Debug, Clone)]
pub struct RangeSolver {
    pub sqrt: DMatrix<f64>,
    pub pinv_sqrt: DMatrix<f64>,
    pub eigen: PsdEigen,
    pub tau: f64,
}

impl RangeSolver {
    pub fn new(q: &DMatrix<f64>, tau: f64) -> Result<Self> {
        let eigen = PsdEigen::new(q)?;
        Ok(Self {
            sqrt: eigen.sqrt(),
            pinv_sqrt: eigen.pinv_sqrt(),
            eigen,
            tau,
        })
    }

    /// Least-squares preimage and relative residual.
    pub fn preimage(&self, y: &DVector<f64>) -> (DVector<f64>, f64) {
        let w = &self.pinv_sqrt * y;
        let norm_y = y.norm();
        if norm_y == 0.0 {
            return (w, 0.0);
        }
        let residual = (&self.sqrt * &w - y).norm() / norm_y;
        (w, residual)
    }

    pub fn in_range(&self, y: &DVector<f64>) -> bool {
        self.preimage(y).1 <= self.tau
    }

    /// `|Q^{-1/2} y|`, `+∞` off the range.
    pub fn norm_of_preimage(&self, y: &DVector<f64>) -> f64 {
        let (w, residual) = self.preimage(y);
        if residual > self.tau {
            f64::INFINITY
        } else {
            w.norm()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_sqrt(&m).unwrap();
        assert!((&s * &s - &m).norm() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(psd_sqrt(&m).is_err());
    }

    #[test]
    fn clamps_roundoff_negatives() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-14]);
        let e = PsdEigen::new(&m).unwrap();
        assert!(e.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn range_solver_detects_kernel_direction() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let solver = RangeSolver::new(&q, TAU_RANGE).unwrap();
        assert_eq!(solver.norm_of_preimage(&DVector::from_vec(vec![2.0, 0.0])), 2.0);
        assert!(solver.norm_of_preimage(&DVector::from_vec(vec![0.0, 1.0])).is_infinite());
        assert_eq!(solver.norm_of_preimage(&DVector::zeros(2)), 0.0);
    }
}
