//! Fixed-step classical Runge–Kutta for autonomous right-hand sides.

/// Scratch space for [`Rk4::step`]; reuse across steps to avoid allocation.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    /// Advances `x` by `dt` under `ẋ = f(x)`, with `f(x, out)` writing into `out`.
    pub fn step<F: FnMut(&[f64], &mut [f64])>(&mut self, mut f: F, x: &mut [f64], dt: f64) {
        let n = x.len();
        f(x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * dt * self.k1[i];
        }
        f(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * dt * self.k2[i];
        }
        f(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        f(&self.tmp, &mut self.k4);
        for i in 0..n {
            x[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// `out = A·x + b` for a row-major-agnostic nalgebra matrix.
pub fn affine_into(a: &crate::matcore::Matrix, x: &[f64], b: &[f64], out: &mut [f64]) {
    let (m, n) = a.shape();
    out[..m].copy_from_slice(&b[..m]);
    for j in 0..n {
        let xj = x[j];
        if xj != 0.0 {
            let col = a.column(j);
            for i in 0..m {
                out[i] += col[i] * xj;
            }
        }
    }
}
