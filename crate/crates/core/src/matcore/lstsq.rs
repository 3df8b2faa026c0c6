use super::{max_abs, MatError, Matrix, Vector, TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub x: Vector,
    /// `‖Ax − b‖₂` at the minimizer.
    pub residual: f64,
}

/// Minimizes `‖Ax − b‖₂` through a Householder QR of `A`.
pub fn solve_least_squares(a: &Matrix, b: &Vector) -> Result<LeastSquares, MatError> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(MatError::ShapeMismatch {
            left: (m, n),
            right: (b.len(), 1),
        });
    }
    if m < n {
        return Err(MatError::RankDeficient);
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let threshold = TOL.rank * max_abs(a).max(f64::MIN_POSITIVE);
    if (0..n).any(|i| r[(i, i)].abs() <= threshold) {
        return Err(MatError::RankDeficient);
    }
    let qtb = qr.q().transpose() * b;
    let x = r
        .solve_upper_triangular(&qtb)
        .ok_or(MatError::RankDeficient)?;
    let residual = (a * &x - b).norm();
    Ok(LeastSquares { x, residual })
}
