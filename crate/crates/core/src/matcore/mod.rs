//! Dense real linear algebra used throughout the crate.
//!
//! Matrices are plain `nalgebra` dynamic matrices; this module adds the
//! handful of operations the set-invariance machinery needs on top of them:
//! Kronecker and Hadamard products, canonicalized eigen-decompositions,
//! least squares and a small dense QP solver.

mod eigen;
mod lstsq;
mod qp;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use eigen::{canonicalize_columns, real_eig, sym_eig, SpectralForm};
pub use lstsq::{solve_least_squares, LeastSquares};
pub use qp::{qp_solve, qp_solve_from, QpError, QpProblem, QpSolution};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Numerical thresholds shared by every module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Relative residual accepted for factorizations and KKT systems.
    pub residual: f64,
    /// Absolute asymmetry accepted by `sym_eig`.
    pub symmetry: f64,
    /// Rank threshold, relative to the max-abs entry of the matrix.
    pub rank: f64,
}

pub const TOL: Tolerances = Tolerances {
    residual: 1e-8,
    symmetry: 1e-10,
    rank: 1e-12,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("defective or complex spectrum (reconstruction residual {0:e})")]
    DefectiveOrComplex(f64),
    #[error("matrix is rank deficient")]
    RankDeficient,
    #[error("non-finite entry")]
    NonFinite,
}

/// Largest absolute entry, `‖A‖_max`.
pub fn max_abs(a: &Matrix) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Elementwise absolute value.
pub fn abs(a: &Matrix) -> Matrix {
    a.map(f64::abs)
}

pub fn abs_vec(v: &Vector) -> Vector {
    v.map(f64::abs)
}

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// `v ⊗ 1ₙ`: every entry repeated `n` times.
pub fn repeat_each(v: &Vector, n: usize) -> Vector {
    Vector::from_fn(v.len() * n, |i, _| v[i / n])
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix, MatError> {
    if a.shape() != b.shape() {
        return Err(MatError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.component_mul(b))
}

/// Builds a matrix from a list of rows. Panics on ragged input.
pub fn from_rows(rows: &[Vec<f64>]) -> Matrix {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
    Matrix::from_fn(r, c, |i, j| rows[i][j])
}

pub fn to_rows(a: &Matrix) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| a.row(i).iter().copied().collect())
        .collect()
}

pub fn all_finite(a: &Matrix) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Inverse through LU, with a finiteness check on the result.
pub fn inverse(a: &Matrix) -> Result<Matrix, MatError> {
    if !a.is_square() {
        return Err(MatError::NotSquare(a.nrows(), a.ncols()));
    }
    let inv = a
        .clone()
        .lu()
        .try_inverse()
        .ok_or(MatError::RankDeficient)?;
    if all_finite(&inv) {
        Ok(inv)
    } else {
        Err(MatError::RankDeficient)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(r: usize, c: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-3.0..3.0_f64, r * c)
            .prop_map(move |v| Matrix::from_row_slice(r, c, &v))
    }

    #[test]
    fn kron_identity() {
        let k = kron(&Matrix::identity(2, 2), &Matrix::identity(3, 3));
        assert_eq!(k, Matrix::identity(6, 6));
    }

    #[test]
    fn kron_block_expansion() {
        let a = from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let k = kron(&a, &Matrix::identity(2, 2));
        let expected = from_rows(&[
            vec![1.0, 0.0, 2.0, 0.0],
            vec![0.0, 1.0, 0.0, 2.0],
            vec![3.0, 0.0, 4.0, 0.0],
            vec![0.0, 3.0, 0.0, 4.0],
        ]);
        assert_eq!(k, expected);
    }

    #[test]
    fn kron_spectrum_is_product_of_spectra() {
        let a = from_rows(&[
            vec![2.0, 1.0, 0.0],
            vec![1.0, 3.0, -1.0],
            vec![0.0, -1.0, 1.5],
        ]);
        let b = from_rows(&[
            vec![1.0, 0.5, 0.2],
            vec![0.5, -2.0, 0.0],
            vec![0.2, 0.0, 0.7],
        ]);
        let ea = sym_eig(&a).unwrap().values;
        let eb = sym_eig(&b).unwrap().values;
        let mut products: Vec<f64> = ea
            .iter()
            .flat_map(|x| eb.iter().map(move |y| x * y))
            .collect();
        products.sort_by(f64::total_cmp);
        let ek = sym_eig(&kron(&a, &b)).unwrap().values;
        for (p, e) in products.iter().zip(ek.iter()) {
            assert!((p - e).abs() < 1e-9, "{p} vs {e}");
        }
    }

    #[test]
    fn hadamard_cases() {
        let a = from_rows(&[vec![1.0, -2.0], vec![3.5, 4.0]]);
        assert_eq!(hadamard(&a, &Matrix::from_element(2, 2, 1.0)).unwrap(), a);
        assert_eq!(
            hadamard(&a, &Matrix::zeros(2, 2)).unwrap(),
            Matrix::zeros(2, 2)
        );
        // V ⊙ (1 ⊗ bᵀ) scales the columns of V.
        let b = Matrix::from_row_slice(1, 2, &[2.0, 3.0]);
        let ones = Matrix::from_element(2, 1, 1.0);
        let scaled = hadamard(&Matrix::identity(2, 2), &kron(&ones, &b)).unwrap();
        assert_eq!(scaled, Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0])));
        assert!(matches!(
            hadamard(&a, &Matrix::zeros(2, 3)),
            Err(MatError::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn kron_mixed_product(a in mat(2, 3), b in mat(2, 2), c in mat(3, 2), d in mat(2, 3)) {
            let lhs = kron(&a, &b) * kron(&c, &d);
            let rhs = kron(&(&a * &c), &(&b * &d));
            prop_assert!(max_abs(&(lhs - rhs)) <= 1e-10);
        }
    }
}
