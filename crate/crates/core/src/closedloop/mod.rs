//! Tracking-error dynamics of the noisy PD displacement controller.
//!
//! With positions and velocities stacked agent-major (`p = [p₁; …; p_N]`,
//! each `p_i ∈ ℝⁿ`), the error `x = [e_p; e_v]` obeys
//! `ẋ = Γ̃x + E[ε; ξ]` with
//!
//! ```text
//! Γ̃ = [[O, I], [−k_p L⊗Iₙ, −k_v L⊗Iₙ]]
//! E = [[O, O], [−k_p H̃ᵀ, −k_v H̃ᵀ]],   H̃ = H⊗Iₙ
//! ```
//!
//! where `L` is the leader-biased Laplacian. Each Laplacian eigenpair
//! `(λ_i, v_i)` yields two closed-loop modes `μ_{i,±} = (−k_vλ_i ± √Δ_i)/2`,
//! `Δ_i = k_v²λ_i² − 4k_pλ_i`, with eigenvectors `[v_i; μ_{i,±}v_i]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invariants::{InvariantError, UltimateBounds, Zonotope};
use crate::matcore::{abs, kron, repeat_each, sym_eig, MatError, Matrix, SpectralForm, Vector};
use crate::topology::{incidence, laplacian, modified_laplacian, FormationGraph, GraphError};

/// Default relative discriminant margin: `Δ_i ≥ 1e-6·(k_vλ_i)²`.
pub const DISCRIMINANT_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClosedLoopError {
    #[error("gains must be positive and finite (k_p = {kp}, k_v = {kv})")]
    InvalidGains { kp: f64, kv: f64 },
    #[error("complex or defective closed-loop spectrum; infeasible gains (mode {mode}, discriminant {discriminant})")]
    Discriminant { mode: usize, discriminant: f64 },
    #[error("modified Laplacian must be positive definite (smallest eigenvalue {0})")]
    NotPositiveDefinite(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("noise bounds must be nonnegative and finite")]
    InvalidNoise,
    #[error(transparent)]
    Linalg(#[from] MatError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub kp: f64,
    pub kv: f64,
}

impl Gains {
    pub fn new(kp: f64, kv: f64) -> Result<Self, ClosedLoopError> {
        let g = Self { kp, kv };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ClosedLoopError> {
        if self.kp > 0.0 && self.kv > 0.0 && self.kp.is_finite() && self.kv.is_finite() {
            Ok(())
        } else {
            Err(ClosedLoopError::InvalidGains {
                kp: self.kp,
                kv: self.kv,
            })
        }
    }

    /// `k_v²λ² − 4k_pλ`.
    pub fn discriminant(&self, lambda: f64) -> f64 {
        self.kv * self.kv * lambda * lambda - 4.0 * self.kp * lambda
    }

    /// `(μ₊, μ₋)` for Laplacian eigenvalue `λ`; `None` if the pair is complex.
    pub fn modes(&self, lambda: f64) -> Option<(f64, f64)> {
        let disc = self.discriminant(lambda);
        (disc >= 0.0).then(|| {
            let s = disc.sqrt();
            ((-self.kv * lambda + s) / 2.0, (-self.kv * lambda - s) / 2.0)
        })
    }
}

/// Edge-measurement noise boxes `|ε − c_ε| ≤ ε̄`, `|ξ − c_ξ| ≤ ξ̄`, each of
/// length `nM` (edge-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBounds {
    pub eps_bar: Vector,
    pub xi_bar: Vector,
    pub eps_center: Vector,
    pub xi_center: Vector,
}

impl NoiseBounds {
    pub fn symmetric(eps_bar: Vector, xi_bar: Vector) -> Result<Self, ClosedLoopError> {
        let (ne, nx) = (eps_bar.len(), xi_bar.len());
        Self::new(eps_bar, xi_bar, Vector::zeros(ne), Vector::zeros(nx))
    }

    /// Same bound on every edge and axis.
    pub fn uniform(n_edges: usize, dim: usize, eps: f64, xi: f64) -> Result<Self, ClosedLoopError> {
        let m = n_edges * dim;
        Self::symmetric(Vector::from_element(m, eps), Vector::from_element(m, xi))
    }

    /// Recenters interval bounds `lo ≤ noise ≤ hi`.
    pub fn from_intervals(
        eps_lo: &Vector,
        eps_hi: &Vector,
        xi_lo: &Vector,
        xi_hi: &Vector,
    ) -> Result<Self, ClosedLoopError> {
        Self::new(
            (eps_hi - eps_lo) / 2.0,
            (xi_hi - xi_lo) / 2.0,
            (eps_hi + eps_lo) / 2.0,
            (xi_hi + xi_lo) / 2.0,
        )
    }

    pub fn new(eps_bar: Vector, xi_bar: Vector, eps_center: Vector, xi_center: Vector) -> Result<Self, ClosedLoopError> {
        let m = eps_bar.len();
        if xi_bar.len() != m || eps_center.len() != m || xi_center.len() != m {
            return Err(ClosedLoopError::Dimension("noise vectors differ in length".into()));
        }
        let ok = |v: &Vector| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        let finite = |v: &Vector| v.iter().all(|x| x.is_finite());
        if !ok(&eps_bar) || !ok(&xi_bar) || !finite(&eps_center) || !finite(&xi_center) {
            return Err(ClosedLoopError::InvalidNoise);
        }
        Ok(Self {
            eps_bar,
            xi_bar,
            eps_center,
            xi_center,
        })
    }

    pub fn len(&self) -> usize {
        self.eps_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps_bar.is_empty()
    }

    /// `[ε; ξ]` as a zonotope in measurement space.
    pub fn zonotope(&self) -> Zonotope {
        let half = concat(&self.eps_bar, &self.xi_bar);
        Zonotope {
            center: concat(&self.eps_center, &self.xi_center),
            generators: Matrix::from_diagonal(&half),
        }
    }
}

fn concat(a: &Vector, b: &Vector) -> Vector {
    Vector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// `Γ̃` for the leader-biased Laplacian `l_mod`.
pub fn error_dynamics(l_mod: &Matrix, gains: Gains, n: usize) -> Result<Matrix, ClosedLoopError> {
    if !l_mod.is_square() || n == 0 {
        return Err(ClosedLoopError::Dimension("Laplacian must be square and n ≥ 1".into()));
    }
    let big_n = l_mod.nrows() * n;
    let ln = kron(l_mod, &Matrix::identity(n, n));
    let mut g = Matrix::zeros(2 * big_n, 2 * big_n);
    g.view_mut((0, big_n), (big_n, big_n)).fill_with_identity();
    g.view_mut((big_n, 0), (big_n, big_n)).copy_from(&(&ln * -gains.kp));
    g.view_mut((big_n, big_n), (big_n, big_n)).copy_from(&(&ln * -gains.kv));
    Ok(g)
}

/// `E`, mapping `[ε; ξ]` (each `nM`) into the error state (`2nN`).
pub fn disturbance_matrix(h: &Matrix, gains: Gains, n: usize) -> Matrix {
    let ht = kron(h, &Matrix::identity(n, n)).transpose();
    let (nn, nm) = ht.shape();
    let mut e = Matrix::zeros(2 * nn, 2 * nm);
    e.view_mut((nn, 0), (nn, nm)).copy_from(&(&ht * -gains.kp));
    e.view_mut((nn, nm), (nn, nm)).copy_from(&(&ht * -gains.kv));
    e
}

/// Closed-form spectral factorization of `Γ̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    pub gains: Gains,
    pub n: usize,
    /// Eigenvalues of the modified Laplacian, ascending.
    pub lambdas: Vector,
    /// Orthonormal eigenvectors of the modified Laplacian.
    pub v: Matrix,
    pub discriminants: Vector,
    pub mu_plus: Vector,
    pub mu_minus: Vector,
}

impl Factorization {
    pub fn n_agents(&self) -> usize {
        self.lambdas.len()
    }

    /// Diagonal of `Λ̃_Γ = blkdiag(Λ₊, Λ₋)⊗Iₙ`.
    pub fn lambda_gamma(&self) -> Vector {
        repeat_each(&concat(&self.mu_plus, &self.mu_minus), self.n)
    }

    /// `Ṽ_Γ = [[V, V], [VΛ₊, VΛ₋]]⊗Iₙ`.
    pub fn v_gamma(&self) -> Matrix {
        let big_n = self.n_agents();
        let mut vg = Matrix::zeros(2 * big_n, 2 * big_n);
        vg.view_mut((0, 0), (big_n, big_n)).copy_from(&self.v);
        vg.view_mut((0, big_n), (big_n, big_n)).copy_from(&self.v);
        vg.view_mut((big_n, 0), (big_n, big_n))
            .copy_from(&(&self.v * Matrix::from_diagonal(&self.mu_plus)));
        vg.view_mut((big_n, big_n), (big_n, big_n))
            .copy_from(&(&self.v * Matrix::from_diagonal(&self.mu_minus)));
        kron(&vg, &Matrix::identity(self.n, self.n))
    }

    pub fn spectral_form(&self) -> SpectralForm {
        SpectralForm {
            values: self.lambda_gamma(),
            vectors: self.v_gamma(),
        }
    }

    /// `([det V]² ∏(−√Δ_i))ⁿ`.
    pub fn det_v_gamma(&self) -> f64 {
        let det_v = self.v.determinant();
        let prod: f64 = self.discriminants.iter().map(|d| -d.sqrt()).product();
        (det_v * det_v * prod).powi(self.n as i32)
    }
}

/// Factorizes `Γ̃` from the spectrum of `l_mod`, requiring
/// `Δ_i ≥ margin·(k_vλ_i)²` for every mode.
pub fn factorize(l_mod: &Matrix, gains: Gains, n: usize, margin: f64) -> Result<Factorization, ClosedLoopError> {
    gains.validate()?;
    if n == 0 {
        return Err(ClosedLoopError::Dimension("n ≥ 1".into()));
    }
    let spec = sym_eig(l_mod)?;
    if !(spec.values[0] > 0.0) {
        return Err(ClosedLoopError::NotPositiveDefinite(spec.values[0]));
    }
    let big_n = spec.values.len();
    let mut discriminants = Vector::zeros(big_n);
    let mut mu_plus = Vector::zeros(big_n);
    let mut mu_minus = Vector::zeros(big_n);
    for (i, &lambda) in spec.values.iter().enumerate() {
        let disc = gains.discriminant(lambda);
        let floor = margin * (gains.kv * lambda).powi(2);
        if !(disc > 0.0 && disc >= floor) {
            return Err(ClosedLoopError::Discriminant {
                mode: i,
                discriminant: disc,
            });
        }
        let (p, m) = gains.modes(lambda).expect("positive discriminant");
        discriminants[i] = disc;
        mu_plus[i] = p;
        mu_minus[i] = m;
    }
    Ok(Factorization {
        gains,
        n,
        lambdas: spec.values,
        v: spec.vectors,
        discriminants,
        mu_plus,
        mu_minus,
    })
}

/// Diagonals of the blocks of `−Λ_Γ⁻¹·blkdiag(S⁻¹,S⁻¹)·[[Λ₋, −I], [−Λ₊, I]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DBlocks {
    pub d11: Vector,
    pub d12: Vector,
    pub d21: Vector,
    pub d22: Vector,
}

pub fn d_blocks(f: &Factorization) -> DBlocks {
    let (kv, n) = (f.gains.kv, f.n_agents());
    let mut out = DBlocks {
        d11: Vector::zeros(n),
        d12: Vector::zeros(n),
        d21: Vector::zeros(n),
        d22: Vector::zeros(n),
    };
    for i in 0..n {
        let (l, s) = (f.lambdas[i], f.discriminants[i].sqrt());
        out.d11[i] = (kv * l + s) / (s * (kv * l - s));
        out.d12[i] = 2.0 / (s * (kv * l - s));
        out.d21[i] = (s - kv * l) / (s * (kv * l + s));
        out.d22[i] = -2.0 / (s * (kv * l + s));
    }
    out
}

/// `Ṽ_Γ⁻¹` from the block formula `[[S⁻¹Λ₋V⁻¹, −S⁻¹V⁻¹], [−S⁻¹Λ₊V⁻¹, S⁻¹V⁻¹]]⊗Iₙ`,
/// `S = Λ₋ − Λ₊`.
pub fn v_gamma_inverse(f: &Factorization) -> Result<Matrix, ClosedLoopError> {
    let big_n = f.n_agents();
    let s = &f.mu_minus - &f.mu_plus;
    if s.iter().any(|x| *x == 0.0) {
        return Err(ClosedLoopError::Linalg(MatError::RankDeficient));
    }
    let s_inv = s.map(|x| 1.0 / x);
    let v_inv = f.v.transpose();
    let diag = |d: Vector| Matrix::from_diagonal(&d) * &v_inv;
    let mut out = Matrix::zeros(2 * big_n, 2 * big_n);
    out.view_mut((0, 0), (big_n, big_n))
        .copy_from(&diag(s_inv.component_mul(&f.mu_minus)));
    out.view_mut((0, big_n), (big_n, big_n)).copy_from(&diag(-&s_inv));
    out.view_mut((big_n, 0), (big_n, big_n))
        .copy_from(&diag(-s_inv.component_mul(&f.mu_plus)));
    out.view_mut((big_n, big_n), (big_n, big_n)).copy_from(&diag(s_inv));
    Ok(kron(&out, &Matrix::identity(f.n, f.n)))
}

/// Closed-form `b_Γ` (length `2N`) for the uniform synthetic box in which both
/// half-blocks carry the per-node bound `δ̄_N`; `d̄ = |V⁻¹|δ̄_N`.
pub fn b_gamma(f: &Factorization, delta_bar_n: &Vector) -> Result<Vector, ClosedLoopError> {
    let n = f.n_agents();
    if delta_bar_n.len() != n || delta_bar_n.iter().any(|x| !(*x >= 0.0)) {
        return Err(ClosedLoopError::InvalidNoise);
    }
    let d_bar = abs(&f.v.transpose()) * delta_bar_n;
    let kv = f.gains.kv;
    let mut b = Vector::zeros(2 * n);
    for i in 0..n {
        let (l, s) = (f.lambdas[i], f.discriminants[i].sqrt());
        assert!(kv * l - s > 0.0, "k_vλ − √Δ must be positive for k_p, λ > 0");
        b[i] = (2.0 + kv * l + s) / (s * (kv * l - s)) * d_bar[i];
        b[i + n] = (2.0 + kv * l - s) / (s * (kv * l + s)) * d_bar[i];
    }
    Ok(b)
}

/// `b̃_Γ = b_Γ ⊗ 1ₙ`.
pub fn b_gamma_tilde(f: &Factorization, delta_bar_n: &Vector) -> Result<Vector, ClosedLoopError> {
    let b = b_gamma(f, delta_bar_n)?;
    Ok(repeat_each(&b, f.n))
}

/// Per-node bound `δ̄_N,i = max_axis Σ_k |H_ki|(ε̄_{k,axis} + ξ̄_{k,axis})`.
pub fn node_noise_bound(h: &Matrix, noise: &NoiseBounds, n: usize) -> Result<Vector, ClosedLoopError> {
    let (m, big_n) = h.shape();
    if noise.len() != m * n {
        return Err(ClosedLoopError::Dimension(format!(
            "noise length {} for {m} edges in dimension {n}",
            noise.len()
        )));
    }
    Ok(Vector::from_fn(big_n, |i, _| {
        (0..n)
            .map(|axis| {
                (0..m)
                    .map(|k| h[(k, i)].abs() * (noise.eps_bar[k * n + axis] + noise.xi_bar[k * n + axis]))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }))
}

/// Gain-parameterized volume
/// `[ ∏_i d_i² ((1 + λ_i(k_p+k_v)) / (√Δ_i k_pλ_i))ⁿ ]²` for orthonormal `V`.
pub fn volume_closed_form(gains: Gains, lambdas: &Vector, d: &Vector, n: usize) -> Result<f64, ClosedLoopError> {
    log_volume_closed_form(gains, lambdas, d, n).map(f64::exp)
}

/// Natural log of [`volume_closed_form`].
pub fn log_volume_closed_form(gains: Gains, lambdas: &Vector, d: &Vector, n: usize) -> Result<f64, ClosedLoopError> {
    gains.validate()?;
    if d.len() != lambdas.len() {
        return Err(ClosedLoopError::Dimension("d and λ differ in length".into()));
    }
    let mut acc = 0.0;
    for (i, (&l, &di)) in lambdas.iter().zip(d.iter()).enumerate() {
        let disc = gains.discriminant(l);
        if !(disc > 0.0) {
            return Err(ClosedLoopError::Discriminant {
                mode: i,
                discriminant: disc,
            });
        }
        let factor = (1.0 + l * (gains.kp + gains.kv)) / (disc.sqrt() * gains.kp * l);
        acc += 2.0 * di.abs().ln() + n as f64 * factor.ln();
    }
    Ok(2.0 * acc)
}

/// Full closed-loop analysis of a formation under measurement noise.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub graph: FormationGraph,
    pub alpha: f64,
    pub n: usize,
    pub factorization: Factorization,
    pub gamma: Matrix,
    pub e: Matrix,
    pub noise: NoiseBounds,
    /// Ultimate bounds of the error state under `Δ = E·⟨c, diag(ε̄‖ξ̄)⟩`.
    pub bounds: UltimateBounds,
    /// Per-agent, per-axis position error bound `S_p|Ṽ_Γ|b̃_Γ` (length `nN`).
    pub r_p: Vector,
}

impl ClosedLoop {
    pub fn analyze(
        graph: &FormationGraph,
        alpha: f64,
        gains: Gains,
        n: usize,
        noise: &NoiseBounds,
    ) -> Result<Self, ClosedLoopError> {
        Self::analyze_with_margin(graph, alpha, gains, n, noise, DISCRIMINANT_MARGIN)
    }

    pub fn analyze_with_margin(
        graph: &FormationGraph,
        alpha: f64,
        gains: Gains,
        n: usize,
        noise: &NoiseBounds,
        margin: f64,
    ) -> Result<Self, ClosedLoopError> {
        let h = incidence(graph);
        if noise.len() != h.nrows() * n {
            return Err(ClosedLoopError::Dimension(format!(
                "noise length {} for {} edges in dimension {n}",
                noise.len(),
                h.nrows()
            )));
        }
        let l_mod = modified_laplacian(&laplacian(graph), alpha)?;
        let factorization = factorize(&l_mod, gains, n, margin)?;
        let gamma = error_dynamics(&l_mod, gains, n)?;
        let e = disturbance_matrix(&h, gains, n);
        let meas = noise.zonotope();
        let disturbance = Zonotope {
            center: &e * &meas.center,
            generators: &e * &meas.generators,
        };
        let bounds = UltimateBounds::from_spectral(factorization.spectral_form(), &disturbance)?;
        let big = abs(&bounds.spectral.vectors) * &bounds.bound;
        let r_p = big.rows(0, n * graph.n_agents()).into_owned();
        Ok(Self {
            graph: graph.clone(),
            alpha,
            n,
            factorization,
            gamma,
            e,
            noise: noise.clone(),
            bounds,
            r_p,
        })
    }

    /// Position bound of agent `i` (0-based), one entry per axis.
    pub fn agent_radius(&self, i: usize) -> Vector {
        self.r_p.rows(i * self.n, self.n).into_owned()
    }

    pub fn summary(&self) -> ClosedLoopSummary {
        let f = &self.factorization;
        ClosedLoopSummary {
            gains: f.gains,
            alpha: self.alpha,
            dimension: self.n,
            lambdas: f.lambdas.iter().copied().collect(),
            mu_plus: f.mu_plus.iter().copied().collect(),
            mu_minus: f.mu_minus.iter().copied().collect(),
            b_gamma: self.bounds.bound.iter().copied().collect(),
            r_p: (0..self.graph.n_agents())
                .map(|i| self.agent_radius(i).iter().copied().collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopSummary {
    pub gains: Gains,
    pub alpha: f64,
    pub dimension: usize,
    pub lambdas: Vec<f64>,
    pub mu_plus: Vec<f64>,
    pub mu_minus: Vec<f64>,
    pub b_gamma: Vec<f64>,
    pub r_p: Vec<Vec<f64>>,
}
