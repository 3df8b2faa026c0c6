use nalgebra::{Schur, SymmetricEigen};

use super::{inverse, max_abs, MatError, Matrix, Vector, TOL};

/// Eigenvalue/eigenvector pair `A = V diag(values) V⁻¹` of a diagonalizable
/// matrix with real spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralForm {
    pub values: Vector,
    pub vectors: Matrix,
}

impl SpectralForm {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn inverse_vectors(&self) -> Result<Matrix, MatError> {
        inverse(&self.vectors)
    }

    pub fn reconstruct(&self) -> Result<Matrix, MatError> {
        let vinv = self.inverse_vectors()?;
        Ok(&self.vectors * Matrix::from_diagonal(&self.values) * vinv)
    }

    /// `‖V Λ V⁻¹ − A‖_max`.
    pub fn residual(&self, a: &Matrix) -> f64 {
        match self.reconstruct() {
            Ok(r) => max_abs(&(r - a)),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Scales every column to unit 2-norm with its first nonzero entry positive.
///
/// Entries below `1e-10` of the column's largest magnitude count as zero
/// when choosing the sign, so roundoff cannot flip it.
pub fn canonicalize_columns(v: &Matrix) -> Matrix {
    let mut out = v.clone();
    for mut col in out.column_iter_mut() {
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        col /= norm;
        let big = col.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-10 * big) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
    out
}

/// Symmetric eigen-decomposition, eigenvalues ascending, orthonormal `V`.
pub fn sym_eig(a: &Matrix) -> Result<SpectralForm, MatError> {
    if !a.is_square() {
        return Err(MatError::NotSquare(a.nrows(), a.ncols()));
    }
    if !super::all_finite(a) {
        return Err(MatError::NonFinite);
    }
    let asym = max_abs(&(a - a.transpose()));
    if asym > TOL.symmetry * max_abs(a).max(1.0) {
        return Err(MatError::NotSymmetric(asym));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Matrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SpectralForm {
        values,
        vectors: canonicalize_columns(&vectors),
    })
}

/// Eigen-decomposition of a diagonalizable matrix with real spectrum.
///
/// Eigenvalues come from the real Schur form (Francis double-shift QR on the
/// Hessenberg reduction) and are returned in descending order. Each cluster
/// of equal eigenvalues gets its eigenspace from the right singular vectors
/// of `A − λI`, so semisimple repeated eigenvalues are handled. Defective or
/// complex spectra are detected through the reconstruction residual.
pub fn real_eig(a: &Matrix) -> Result<SpectralForm, MatError> {
    if !a.is_square() {
        return Err(MatError::NotSquare(a.nrows(), a.ncols()));
    }
    if !super::all_finite(a) {
        return Err(MatError::NonFinite);
    }
    let n = a.nrows();
    let scale = max_abs(a);
    if scale == 0.0 {
        return Ok(SpectralForm {
            values: Vector::zeros(n),
            vectors: Matrix::identity(n, n),
        });
    }
    // Repeated real eigenvalues can come back as a conjugate pair with a
    // roundoff-sized imaginary part.
    let eigenvalues = Schur::new(a.clone()).complex_eigenvalues();
    let max_im = eigenvalues.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if max_im > 1e-7 * scale {
        return Err(MatError::DefectiveOrComplex(max_im));
    }
    let mut sorted: Vec<f64> = eigenvalues.iter().map(|z| z.re).collect();
    sorted.sort_by(|x, y| y.total_cmp(x));

    let cluster_tol = 1e-9 * scale.max(1.0);
    let mut clusters: Vec<Vec<f64>> = Vec::new();
    for &ev in &sorted {
        match clusters.last_mut() {
            Some(c) if (c[c.len() - 1] - ev).abs() <= cluster_tol => c.push(ev),
            _ => clusters.push(vec![ev]),
        }
    }

    let mut values = Vec::with_capacity(n);
    let mut vectors = Matrix::zeros(n, n);
    let mut col = 0;
    for cluster in &clusters {
        let lambda = cluster.iter().sum::<f64>() / cluster.len() as f64;
        let shifted = a - Matrix::identity(n, n) * lambda;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.as_ref().ok_or(MatError::DefectiveOrComplex(f64::INFINITY))?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
        for &k in idx.iter().take(cluster.len()) {
            vectors.set_column(col, &v_t.row(k).transpose());
            values.push(lambda);
            col += 1;
        }
    }

    let form = SpectralForm {
        values: Vector::from_vec(values),
        vectors: canonicalize_columns(&vectors),
    };
    let residual = form.residual(a);
    if residual > TOL.residual * scale {
        return Err(MatError::DefectiveOrComplex(residual));
    }
    Ok(form)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::from_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn lff_laplacian_spectrum() {
        let l = from_rows(&[
            vec![2.0, -1.0, -1.0, 0.0],
            vec![-1.0, 3.0, -1.0, -1.0],
            vec![-1.0, -1.0, 3.0, -1.0],
            vec![0.0, -1.0, -1.0, 2.0],
        ]);
        let form = sym_eig(&l).unwrap();
        let expected = [0.0, 2.0, 4.0, 4.0];
        for (v, e) in form.values.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        // Eigenvector checks by direct multiplication.
        let w2 = Vector::from_vec(vec![1.0, 0.0, 0.0, -1.0]);
        assert!((&l * &w2 - &w2 * 2.0).norm() < 1e-14);
        let w4 = Vector::from_vec(vec![1.0, -1.0, -1.0, 1.0]);
        assert!((&l * &w4 - &w4 * 4.0).norm() < 1e-14);
        assert!(form.residual(&l) < 1e-12);
    }

    #[test]
    fn trivial_spectra() {
        let form = sym_eig(&Matrix::identity(3, 3)).unwrap();
        assert_eq!(form.values.as_slice(), &[1.0, 1.0, 1.0]);
        let vtv = form.vectors.transpose() * &form.vectors;
        assert!((vtv - Matrix::identity(3, 3)).norm() < 1e-12);

        let d = Matrix::from_diagonal(&Vector::from_vec(vec![5.0, 1.0, 3.0]));
        assert_eq!(sym_eig(&d).unwrap().values.as_slice(), &[1.0, 3.0, 5.0]);

        let d = Matrix::from_diagonal(&Vector::from_vec(vec![-1.0, -2.0]));
        let form = real_eig(&d).unwrap();
        assert_eq!(form.values.as_slice(), &[-1.0, -2.0]);
        assert!((form.vectors - Matrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn rejects_asymmetric() {
        let a = from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert!(matches!(sym_eig(&a), Err(MatError::NotSymmetric(_))));
    }

    #[test]
    fn hurwitz_example_spectrum() {
        let a = from_rows(&[vec![0.0, -2.0], vec![1.0, -3.0]]);
        let form = real_eig(&a).unwrap();
        assert!((form.values[0] + 1.0).abs() < 1e-12);
        assert!((form.values[1] + 2.0).abs() < 1e-12);
        // (2,1)/√5 and (1,1)/√2
        let s5 = 5f64.sqrt();
        let s2 = 2f64.sqrt();
        assert!((form.vectors[(0, 0)] - 2.0 / s5).abs() < 1e-12);
        assert!((form.vectors[(1, 0)] - 1.0 / s5).abs() < 1e-12);
        assert!((form.vectors[(0, 1)] - 1.0 / s2).abs() < 1e-12);
        assert!((form.vectors[(1, 1)] - 1.0 / s2).abs() < 1e-12);
    }

    #[test]
    fn defective_and_complex_are_rejected() {
        let jordan = from_rows(&[vec![-1.0, 1.0], vec![0.0, -1.0]]);
        assert!(matches!(real_eig(&jordan), Err(MatError::DefectiveOrComplex(_))));
        let rotation = from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]);
        assert!(matches!(real_eig(&rotation), Err(MatError::DefectiveOrComplex(_))));
    }

    #[test]
    fn repeated_semisimple_eigenvalues() {
        // Γ ⊗ I_3 style multiplicity.
        let g = from_rows(&[vec![0.0, 1.0], vec![-2.0, -3.0]]);
        let a = g.kronecker(&Matrix::identity(3, 3));
        let form = real_eig(&a).unwrap();
        assert!(form.residual(&a) < 1e-10);
        let mut vals: Vec<f64> = form.values.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        for (v, e) in vals.iter().zip([-2.0, -2.0, -2.0, -1.0, -1.0, -1.0]) {
            assert!((v - e).abs() < 1e-10);
        }
    }

    #[test]
    fn sym_eig_reconstruction_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(1..8);
            let m = random_matrix(&mut rng, n);
            let a = &m + m.transpose();
            let form = sym_eig(&a).unwrap();
            let av = &a * &form.vectors;
            let vl = &form.vectors * Matrix::from_diagonal(&form.values);
            assert!(max_abs(&(av - vl)) <= 1e-9 * max_abs(&a));
            for w in form.values.as_slice().windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn real_eig_reconstruction_random() {
        // Random real-spectrum matrices T D T⁻¹ with well separated D.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(1..7);
            let t = random_matrix(&mut rng, n) + Matrix::identity(n, n) * 2.0;
            let d = Vector::from_fn(n, |i, _| -(i as f64) - rng.random_range(0.1..0.5));
            let a = &t * Matrix::from_diagonal(&d) * inverse(&t).unwrap();
            let form = real_eig(&a).unwrap();
            assert!(form.residual(&a) <= 1e-8 * max_abs(&a));
        }
    }

    #[test]
    fn real_eig_agrees_with_sym_eig() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(1..7);
            let m = random_matrix(&mut rng, n);
            let a = &m + m.transpose();
            let s = sym_eig(&a).unwrap();
            let r = real_eig(&a).unwrap();
            let mut rv: Vec<f64> = r.values.iter().copied().collect();
            rv.sort_by(f64::total_cmp);
            for (x, y) in s.values.iter().zip(rv) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn canonical_form_is_column_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = from_rows(&[vec![0.0, -2.0], vec![1.0, -3.0]]);
        let form = real_eig(&a).unwrap();
        for _ in 0..50 {
            let d = Vector::from_fn(2, |_, _| rng.random_range(0.01..100.0));
            let scaled = &form.vectors * Matrix::from_diagonal(&d);
            let canon = canonicalize_columns(&scaled);
            assert!(max_abs(&(canon - &form.vectors)) < 1e-14);
        }
    }
}
