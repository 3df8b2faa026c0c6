//! Ultimate-bounds invariant sets of disturbed stable LTI systems.
//!
//! For `ẋ = Ax + δ`, `δ ∈ ⟨c, G⟩` and `A = VΛV⁻¹` with real negative
//! spectrum, the set `Ω = { x : |V⁻¹x| ≤ b }` with
//! `b = |Λ⁻¹|·(|V⁻¹c| + |V⁻¹G|·1)` is robust positively invariant, and so is
//! its bounding box `{ x : |x| ≤ |V|·b }`. `Ω` is itself the zonotope
//! `⟨0, V ⊙ (1 ⊗ bᵀ)⟩`.

mod rpi;
mod sets;

use thiserror::Error;

use crate::matcore::{
    abs, abs_vec, hadamard, kron, real_eig, MatError, Matrix, SpectralForm, Vector,
};

pub use rpi::{rpi_check_from, rpi_check_sampled, DisturbancePolicy, RpiOptions, RpiReport, RpiTrajectory};
pub use sets::{box_contains, inflate_polyhedron, BoxSet, Zonotope, MEMBERSHIP_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvariantError {
    #[error("dynamics matrix is not Hurwitz (largest eigenvalue {0})")]
    NotHurwitz(f64),
    #[error(transparent)]
    Linalg(#[from] MatError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry")]
    NonFinite,
    #[error("box half-widths must be nonnegative and finite")]
    InvalidBox,
    #[error("exact volume needs square generators (or a planar zonotope)")]
    NonSquareGenerators,
    #[error("integration step {dt} too large for spectral radius {rate}")]
    StepTooLarge { dt: f64, rate: f64 },
}

/// Componentwise ultimate bound `|V⁻¹x| ≤ b` together with the factorization
/// it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct UltimateBounds {
    pub spectral: SpectralForm,
    pub v_inv: Matrix,
    pub bound: Vector,
}

/// Ultimate bounds of `ẋ = Ax + δ` using the canonical factorization of `A`.
pub fn ultimate_bounds(a: &Matrix, disturbance: &Zonotope) -> Result<UltimateBounds, InvariantError> {
    let spectral = real_eig(a)?;
    UltimateBounds::from_spectral(spectral, disturbance)
}

impl UltimateBounds {
    /// Bounds for a caller-supplied factorization (any column scaling of `V`).
    pub fn from_spectral(spectral: SpectralForm, disturbance: &Zonotope) -> Result<Self, InvariantError> {
        let n = spectral.dim();
        if disturbance.dim() != n {
            return Err(InvariantError::Dimension(format!(
                "disturbance dimension {} vs state dimension {n}",
                disturbance.dim()
            )));
        }
        let slowest = spectral.values.max();
        if !(slowest < 0.0) {
            return Err(InvariantError::NotHurwitz(slowest));
        }
        let v_inv = spectral.inverse_vectors()?;
        let ones = Vector::from_element(disturbance.order(), 1.0);
        let reach = abs_vec(&(&v_inv * &disturbance.center)) + abs(&(&v_inv * &disturbance.generators)) * ones;
        let bound = Vector::from_fn(n, |i, _| reach[i] / spectral.values[i].abs());
        Ok(Self {
            spectral,
            v_inv,
            bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.bound.len()
    }

    /// Modal coordinates `V⁻¹x`.
    pub fn modal(&self, x: &Vector) -> Vector {
        &self.v_inv * x
    }

    /// Largest `|V⁻¹x|_i − b_i`; nonpositive inside the set.
    pub fn excess(&self, x: &Vector) -> f64 {
        let y = self.modal(x);
        (0..y.len())
            .map(|i| y[i].abs() - self.bound[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &Vector) -> bool {
        omega_contains(self, x)
    }

    pub fn zonotope(&self) -> Zonotope {
        ub_zonotope(self)
    }

    /// `{ x : |x| ≤ |V|·b }`.
    pub fn bounding_box(&self) -> BoxSet {
        BoxSet {
            center: Vector::zeros(self.dim()),
            half_widths: abs(&self.spectral.vectors) * &self.bound,
        }
    }

    /// Same factorization with every bound multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            bound: &self.bound * factor,
            ..self.clone()
        }
    }
}

pub fn omega_contains(ub: &UltimateBounds, x: &Vector) -> bool {
    x.len() == ub.dim() && ub.excess(x) <= MEMBERSHIP_TOL
}

/// `Ω = ⟨0, V ⊙ (1ₙ ⊗ bᵀ)⟩`: column `j` of the generators is `b_j·V_j`.
pub fn ub_zonotope(ub: &UltimateBounds) -> Zonotope {
    let n = ub.dim();
    let ones = Matrix::from_element(n, 1, 1.0);
    let row = Matrix::from_row_slice(1, n, ub.bound.as_slice());
    let generators = hadamard(&ub.spectral.vectors, &kron(&ones, &row)).expect("conforming shapes");
    Zonotope {
        center: Vector::zeros(n),
        generators,
    }
}

/// `(2·det V·∏ b_i)²`, the closed-form expression used as synthesis objective.
///
/// Invariant under positive column scaling of `V`. It is not the Lebesgue
/// measure of `Ω`; see [`volume_exact`] for that.
pub fn volume_paper(ub: &UltimateBounds) -> f64 {
    let det = ub.spectral.vectors.determinant();
    let prod: f64 = ub.bound.iter().product();
    (2.0 * det * prod).powi(2)
}

/// Natural log of [`volume_paper`], safe for high-dimensional sets.
pub fn log_volume_paper(ub: &UltimateBounds) -> f64 {
    let det = ub.spectral.vectors.determinant().abs();
    2.0 * (2f64.ln() + det.ln() + ub.bound.iter().map(|b| b.ln()).sum::<f64>())
}

/// Lebesgue measure of a zonotope: `2ⁿ|det G|` for square generators, and
/// `4·Σ_{i<j} |det[g_i g_j]|` for planar zonotopes of any order.
pub fn volume_exact(z: &Zonotope) -> Result<f64, InvariantError> {
    let n = z.dim();
    let g = &z.generators;
    if g.ncols() == n {
        return Ok(2f64.powi(n as i32) * g.determinant().abs());
    }
    if n == 2 {
        let d = g.ncols();
        let mut area = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                area += (g[(0, i)] * g[(1, j)] - g[(1, i)] * g[(0, j)]).abs();
            }
        }
        return Ok(4.0 * area);
    }
    Err(InvariantError::NonSquareGenerators)
}
