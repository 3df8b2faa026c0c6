//! Dense primal active-set QP solver.
//!
//! Solves
//!
//! ```text
//! min ½xᵀQx + cᵀx   s.t.  A_eq x = b_eq,  A_in x ≤ b_in,  lower ≤ x ≤ upper
//! ```
//!
//! for symmetric positive semidefinite `Q`. A feasible start is found with a
//! one-slack phase 1 (`min ½t²` subject to `A_in x − t ≤ b_in`), then the
//! null-space active-set iteration runs on the original objective. Zero
//! curvature directions of the reduced Hessian are followed to the nearest
//! blocking constraint, which is also how unboundedness is detected.

use nalgebra::SymmetricEigen;
use thiserror::Error;

use super::{max_abs, solve_least_squares, Matrix, Vector, TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("inconsistent problem dimensions: {0}")]
    Dimension(String),
    #[error("problem is infeasible (smallest achievable violation {violation:e})")]
    Infeasible { violation: f64 },
    #[error("problem is unbounded below")]
    Unbounded,
    #[error("active-set iteration limit ({0}) reached")]
    MaxIterations(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: Matrix,
    pub c: Vector,
    pub a_eq: Matrix,
    pub b_eq: Vector,
    pub a_in: Matrix,
    pub b_in: Vector,
    pub lower: Vector,
    pub upper: Vector,
}

impl QpProblem {
    /// Unconstrained problem `min ½xᵀQx + cᵀx`.
    pub fn new(q: Matrix, c: Vector) -> Self {
        let n = c.len();
        Self {
            q,
            c,
            a_eq: Matrix::zeros(0, n),
            b_eq: Vector::zeros(0),
            a_in: Matrix::zeros(0, n),
            b_in: Vector::zeros(0),
            lower: Vector::from_element(n, f64::NEG_INFINITY),
            upper: Vector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_eq(mut self, a: Matrix, b: Vector) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_ineq(mut self, a: Matrix, b: Vector) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lower: Vector, upper: Vector) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x)
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let bad = |what: &str| Err(QpError::Dimension(what.to_owned()));
        if self.q.shape() != (n, n) {
            return bad("Q must be n x n");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality block");
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return bad("inequality block");
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bounds");
        }
        let asym = max_abs(&(&self.q - self.q.transpose()));
        if asym > 1e-12 * max_abs(&self.q).max(1.0) {
            return bad("Q is not symmetric");
        }
        if (0..n).any(|i| self.lower[i] > self.upper[i]) {
            return Err(QpError::Infeasible {
                violation: (0..n)
                    .map(|i| self.lower[i] - self.upper[i])
                    .fold(0.0, f64::max),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vector,
    pub objective: f64,
    /// Indices of the rows of `a_in` in the final working set.
    pub active_ineq: Vec<usize>,
    /// Multipliers of the `a_in` rows (zero when inactive).
    pub multipliers_ineq: Vector,
    pub multipliers_eq: Vector,
    /// `max(‖Qx + c + Aᵀλ‖∞, max primal violation)`, scaled by the data.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Solves from the origin (clipped into the bounds).
pub fn qp_solve(p: &QpProblem) -> Result<QpSolution, QpError> {
    qp_solve_from(p, &Vector::zeros(p.dim()))
}

/// Solves starting from `x0`; a feasible `x0` skips phase 1.
pub fn qp_solve_from(p: &QpProblem, x0: &Vector) -> Result<QpSolution, QpError> {
    p.validate()?;
    let n = p.dim();
    if x0.len() != n {
        return Err(QpError::Dimension("warm start".into()));
    }
    let (g, h, origin) = stacked_inequalities(p);
    let e = &p.a_eq;
    let f = &p.b_eq;
    let data_scale = 1.0 + max_abs(&g).max(max_abs(e)) + h.amax().max(f.amax());
    let feas_tol = 1e-9 * data_scale;

    let mut x = x0.map(|v| if v.is_finite() { v } else { 0.0 });
    for i in 0..n {
        x[i] = x[i].clamp(p.lower[i], p.upper[i]);
    }
    if e.nrows() > 0 {
        x = project_affine(e, f, &x)?;
        if (e * &x - f).amax() > feas_tol {
            return Err(QpError::Infeasible {
                violation: (e * &x - f).amax(),
            });
        }
    }

    let max_iter = 50 * (n + g.nrows() + e.nrows()) + 200;
    let mut iterations = 0;

    let violation = max_violation(&g, &h, &x);
    if violation > feas_tol {
        x = phase_one(&g, &h, e, &x, violation, feas_tol, max_iter, &mut iterations)?;
    }

    let mut engine = ActiveSet {
        q: &p.q,
        c: &p.c,
        e,
        g: &g,
        h: &h,
        feas_tol,
    };
    let working = engine.initial_working_set(&x);
    let (x, working, lambda) = engine.run(x, working, max_iter, &mut iterations)?;

    // Report multipliers against the caller's rows.
    let me = e.nrows();
    let mut mult_ineq = Vector::zeros(p.a_in.nrows());
    let mut mult_eq = Vector::zeros(me);
    let mut active_ineq = Vec::new();
    for (slot, &row) in working.iter().enumerate() {
        let value = lambda[me + slot];
        if let RowOrigin::Ineq(k) = origin[row] {
            mult_ineq[k] = value;
            active_ineq.push(k);
        }
    }
    for k in 0..me {
        mult_eq[k] = lambda[k];
    }
    active_ineq.sort_unstable();

    let kkt_residual = kkt_residual(p, &g, &h, &working, &lambda, &x);
    if kkt_residual > TOL.residual * data_scale.max(1.0 + max_abs(&p.q) + p.c.amax()) {
        return Err(QpError::Numerical(format!(
            "KKT residual {kkt_residual:e} above tolerance"
        )));
    }
    Ok(QpSolution {
        objective: p.objective(&x),
        x,
        active_ineq,
        multipliers_ineq: mult_ineq,
        multipliers_eq: mult_eq,
        kkt_residual,
        iterations,
    })
}

#[derive(Debug, Clone, Copy)]
enum RowOrigin {
    Ineq(usize),
    Bound,
}

/// `[A_in; −I_lower; I_upper] x ≤ [b_in; −l; u]` over the finite bounds.
fn stacked_inequalities(p: &QpProblem) -> (Matrix, Vector, Vec<RowOrigin>) {
    let n = p.dim();
    let mut rows: Vec<(Vec<f64>, f64, RowOrigin)> = Vec::new();
    for k in 0..p.a_in.nrows() {
        rows.push((p.a_in.row(k).iter().copied().collect(), p.b_in[k], RowOrigin::Ineq(k)));
    }
    for i in 0..n {
        if p.lower[i].is_finite() {
            let mut r = vec![0.0; n];
            r[i] = -1.0;
            rows.push((r, -p.lower[i], RowOrigin::Bound));
        }
        if p.upper[i].is_finite() {
            let mut r = vec![0.0; n];
            r[i] = 1.0;
            rows.push((r, p.upper[i], RowOrigin::Bound));
        }
    }
    let g = Matrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
    let h = Vector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let origin = rows.into_iter().map(|r| r.2).collect();
    (g, h, origin)
}

fn max_violation(g: &Matrix, h: &Vector, x: &Vector) -> f64 {
    if g.nrows() == 0 {
        return 0.0;
    }
    (g * x - h).max().max(0.0)
}

/// Closest point to `x` on `{y : E y = f}` (least-norm correction).
fn project_affine(e: &Matrix, f: &Vector, x: &Vector) -> Result<Vector, QpError> {
    let r = e * x - f;
    let svd = e.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let dx = svd
        .solve(&r, tol)
        .map_err(|m| QpError::Numerical(m.to_owned()))?;
    Ok(x - dx)
}

/// Orthonormal basis of the null space of `rows` (an `r × n` matrix).
fn null_space(rows: &Matrix, n: usize) -> Matrix {
    if rows.nrows() == 0 {
        return Matrix::identity(n, n);
    }
    let mut padded = Matrix::zeros(n.max(rows.nrows()), n);
    padded.rows_mut(0, rows.nrows()).copy_from(rows);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(f64::MIN_POSITIVE);
    let null: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= tol)
        .collect();
    Matrix::from_fn(n, null.len(), |r, c| v_t[(null[c], r)])
}

#[allow(clippy::too_many_arguments)]
fn phase_one(
    g: &Matrix,
    h: &Vector,
    e: &Matrix,
    x: &Vector,
    t0: f64,
    feas_tol: f64,
    max_iter: usize,
    iterations: &mut usize,
) -> Result<Vector, QpError> {
    let n = x.len();
    let m = g.nrows();
    // Variables (x, t): min ½t² s.t. E x = f, G x − t ≤ h, −t ≤ 0. The start
    // already satisfies E x = f and equality rows never leave the working set.
    let mut q = Matrix::zeros(n + 1, n + 1);
    q[(n, n)] = 1.0;
    let c = Vector::zeros(n + 1);
    let mut g1 = Matrix::zeros(m + 1, n + 1);
    g1.view_mut((0, 0), (m, n)).copy_from(g);
    for i in 0..m {
        g1[(i, n)] = -1.0;
    }
    g1[(m, n)] = -1.0;
    let mut h1 = Vector::zeros(m + 1);
    h1.rows_mut(0, m).copy_from(h);
    let mut e1 = Matrix::zeros(e.nrows(), n + 1);
    e1.view_mut((0, 0), (e.nrows(), n)).copy_from(e);
    let mut start = Vector::zeros(n + 1);
    start.rows_mut(0, n).copy_from(x);
    start[n] = t0;

    let mut engine = ActiveSet {
        q: &q,
        c: &c,
        e: &e1,
        g: &g1,
        h: &h1,
        feas_tol,
    };
    let working = engine.initial_working_set(&start);
    let stop = |z: &Vector| z[n] <= 0.1 * feas_tol;
    let (sol, _, _) = engine.run_until(start, working, max_iter, iterations, stop)?;
    let t = sol[n];
    if t > feas_tol {
        return Err(QpError::Infeasible { violation: t });
    }
    Ok(sol.rows(0, n).into_owned())
}

struct ActiveSet<'a> {
    q: &'a Matrix,
    c: &'a Vector,
    e: &'a Matrix,
    g: &'a Matrix,
    h: &'a Vector,
    feas_tol: f64,
}

impl ActiveSet<'_> {
    fn n(&self) -> usize {
        self.c.len()
    }

    /// Active inequality rows at `x`, kept linearly independent together
    /// with the equality rows.
    fn initial_working_set(&self, x: &Vector) -> Vec<usize> {
        let n = self.n();
        let mut working = Vec::new();
        let mut basis = self.e.clone();
        let mut rank = rank_of(&basis);
        for i in 0..self.g.nrows() {
            let slack = self.h[i] - self.g.row(i).dot(&x.transpose());
            if slack.abs() > self.feas_tol || rank >= n {
                continue;
            }
            let mut candidate = basis.clone().insert_row(basis.nrows(), 0.0);
            candidate.row_mut(basis.nrows()).copy_from(&self.g.row(i));
            let r = rank_of(&candidate);
            if r > rank {
                basis = candidate;
                rank = r;
                working.push(i);
            }
        }
        working
    }

    fn working_rows(&self, working: &[usize]) -> Matrix {
        let n = self.n();
        let me = self.e.nrows();
        let mut a = Matrix::zeros(me + working.len(), n);
        a.rows_mut(0, me).copy_from(self.e);
        for (k, &i) in working.iter().enumerate() {
            a.row_mut(me + k).copy_from(&self.g.row(i));
        }
        a
    }

    fn run(
        &mut self,
        x: Vector,
        working: Vec<usize>,
        max_iter: usize,
        iterations: &mut usize,
    ) -> Result<(Vector, Vec<usize>, Vector), QpError> {
        self.run_until(x, working, max_iter, iterations, |_| false)
    }

    fn run_until(
        &mut self,
        mut x: Vector,
        mut working: Vec<usize>,
        max_iter: usize,
        iterations: &mut usize,
        stop: impl Fn(&Vector) -> bool,
    ) -> Result<(Vector, Vec<usize>, Vector), QpError> {
        let n = self.n();
        let me = self.e.nrows();
        let curvature_tol = 1e-11 * (1.0 + max_abs(self.q));
        loop {
            if *iterations >= max_iter {
                return Err(QpError::MaxIterations(max_iter));
            }
            *iterations += 1;
            let grad = self.q * &x + self.c;
            if stop(&x) {
                let a_w = self.working_rows(&working);
                let lambda = multipliers(&a_w, &grad)?;
                return Ok((x, working, lambda));
            }
            let a_w = self.working_rows(&working);
            let z = null_space(&a_w, n);
            let step_scale = 1.0 + x.amax();

            let mut direction: Option<(Vector, bool)> = None;
            if z.ncols() > 0 {
                let reduced_grad = z.transpose() * &grad;
                let reduced_hess = z.transpose() * self.q * &z;
                let reduced_hess = (&reduced_hess + reduced_hess.transpose()) * 0.5;
                let eig = SymmetricEigen::new(reduced_hess);
                let k = z.ncols();
                let mut newton = Vector::zeros(k);
                let mut flat = Vector::zeros(k);
                for j in 0..k {
                    let v = eig.eigenvectors.column(j);
                    let coef = v.dot(&reduced_grad);
                    if eig.eigenvalues[j] > curvature_tol {
                        newton -= v * (coef / eig.eigenvalues[j]);
                    } else {
                        flat -= v * coef;
                    }
                }
                let grad_scale = 1.0 + grad.amax();
                if flat.amax() > 1e-10 * grad_scale {
                    // Descent with zero curvature: move until blocked.
                    direction = Some((&z * flat, true));
                } else {
                    let p = &z * newton;
                    if p.amax() > 1e-12 * step_scale {
                        direction = Some((p, false));
                    }
                }
            }

            match direction {
                None => {
                    let lambda = multipliers(&a_w, &grad)?;
                    let mut worst: Option<(usize, f64)> = None;
                    for slot in 0..working.len() {
                        let l = lambda[me + slot];
                        if l < -1e-10 * (1.0 + grad.amax())
                            && worst.is_none_or(|(_, w)| l < w)
                        {
                            worst = Some((slot, l));
                        }
                    }
                    match worst {
                        None => return Ok((x, working, lambda)),
                        Some((slot, _)) => {
                            working.remove(slot);
                        }
                    }
                }
                Some((p, unbounded_ray)) => {
                    let mut alpha = if unbounded_ray { f64::INFINITY } else { 1.0 };
                    let mut blocking = None;
                    let pn = p.norm();
                    for i in 0..self.g.nrows() {
                        if working.contains(&i) {
                            continue;
                        }
                        let gi = self.g.row(i);
                        let gp = gi.dot(&p.transpose());
                        if gp <= 1e-12 * gi.norm() * pn {
                            continue;
                        }
                        let slack = (self.h[i] - gi.dot(&x.transpose())).max(0.0);
                        let a = slack / gp;
                        if a < alpha {
                            alpha = a;
                            blocking = Some(i);
                        }
                    }
                    if !alpha.is_finite() {
                        return Err(QpError::Unbounded);
                    }
                    x += &p * alpha;
                    if let Some(i) = blocking {
                        working.push(i);
                    }
                }
            }
        }
    }
}

fn rank_of(a: &Matrix) -> usize {
    if a.nrows() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let tol = 1e-10 * sv.max().max(f64::MIN_POSITIVE);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Least-squares multipliers from `A_Wᵀ λ = −∇f`.
fn multipliers(a_w: &Matrix, grad: &Vector) -> Result<Vector, QpError> {
    if a_w.nrows() == 0 {
        return Ok(Vector::zeros(0));
    }
    solve_least_squares(&a_w.transpose(), &(-grad))
        .map(|ls| ls.x)
        .map_err(|e| QpError::Numerical(format!("multiplier solve: {e}")))
}

fn kkt_residual(
    p: &QpProblem,
    g: &Matrix,
    h: &Vector,
    working: &[usize],
    lambda: &Vector,
    x: &Vector,
) -> f64 {
    let me = p.a_eq.nrows();
    let mut stationarity = &p.q * x + &p.c;
    if me > 0 {
        stationarity += p.a_eq.transpose() * lambda.rows(0, me);
    }
    for (slot, &row) in working.iter().enumerate() {
        stationarity += g.row(row).transpose() * lambda[me + slot];
    }
    let primal_eq = if me > 0 { (&p.a_eq * x - &p.b_eq).amax() } else { 0.0 };
    let primal_in = max_violation(g, h, x);
    stationarity.amax().max(primal_eq).max(primal_in)
}
