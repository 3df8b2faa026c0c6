use serde::{Deserialize, Serialize};

use crate::matcore::{abs, from_rows, qp_solve, to_rows, Matrix, QpProblem, Vector};

use super::InvariantError;

/// Zonotope `⟨c, G⟩ = { c + Gλ : ‖λ‖∞ ≤ 1 }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ZonotopeJson", try_from = "ZonotopeJson")]
pub struct Zonotope {
    pub center: Vector,
    pub generators: Matrix,
}

#[derive(Serialize, Deserialize)]
struct ZonotopeJson {
    center: Vec<f64>,
    generators: Vec<Vec<f64>>,
}

impl From<Zonotope> for ZonotopeJson {
    fn from(z: Zonotope) -> Self {
        Self {
            center: z.center.iter().copied().collect(),
            generators: to_rows(&z.generators),
        }
    }
}

impl TryFrom<ZonotopeJson> for Zonotope {
    type Error = InvariantError;

    fn try_from(raw: ZonotopeJson) -> Result<Self, Self::Error> {
        let n = raw.center.len();
        if raw.generators.len() != n {
            return Err(InvariantError::Dimension(format!(
                "zonotope center has {n} entries but generators have {} rows",
                raw.generators.len()
            )));
        }
        let width = raw.generators.first().map_or(0, Vec::len);
        if raw.generators.iter().any(|r| r.len() != width) {
            return Err(InvariantError::Dimension("ragged generator rows".into()));
        }
        let generators = if n == 0 { Matrix::zeros(0, 0) } else { from_rows(&raw.generators) };
        Zonotope::new(Vector::from_vec(raw.center), generators)
    }
}

impl Zonotope {
    pub fn new(center: Vector, generators: Matrix) -> Result<Self, InvariantError> {
        if center.len() != generators.nrows() {
            return Err(InvariantError::Dimension(format!(
                "center length {} vs {} generator rows",
                center.len(),
                generators.nrows()
            )));
        }
        if !center.iter().chain(generators.iter()).all(|x| x.is_finite()) {
            return Err(InvariantError::NonFinite);
        }
        Ok(Self { center, generators })
    }

    /// Axis-aligned box `c ± r` as a zonotope with diagonal generators.
    pub fn from_box(center: Vector, half_widths: &Vector) -> Result<Self, InvariantError> {
        Self::new(center, Matrix::from_diagonal(half_widths))
    }

    pub fn origin(n: usize) -> Self {
        Self {
            center: Vector::zeros(n),
            generators: Matrix::zeros(n, 0),
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn order(&self) -> usize {
        self.generators.ncols()
    }

    /// Support function `h(d) = dᵀc + ‖Gᵀd‖₁`.
    pub fn support(&self, direction: &Vector) -> f64 {
        direction.dot(&self.center) + (self.generators.transpose() * direction).lp_norm(1)
    }

    /// Interval hull `c ± |G|·1`.
    pub fn interval_hull(&self) -> BoxSet {
        let r = abs(&self.generators) * Vector::from_element(self.order(), 1.0);
        BoxSet {
            center: self.center.clone(),
            half_widths: r,
        }
    }

    /// Exact membership: feasibility of `Gλ = x − c, −1 ≤ λ ≤ 1`.
    pub fn contains(&self, x: &Vector) -> bool {
        let d = self.order();
        if d == 0 {
            return (x - &self.center).amax() <= 1e-9;
        }
        let lp = QpProblem::new(Matrix::zeros(d, d), Vector::zeros(d))
            .with_eq(self.generators.clone(), x - &self.center)
            .with_bounds(Vector::from_element(d, -1.0), Vector::from_element(d, 1.0));
        qp_solve(&lp).is_ok()
    }

    /// Vertices of a planar zonotope in counter-clockwise order.
    pub fn vertices_2d(&self) -> Option<Vec<[f64; 2]>> {
        if self.dim() != 2 {
            return None;
        }
        let mut gens: Vec<[f64; 2]> = self
            .generators
            .column_iter()
            .map(|g| {
                // Normalize every generator into the upper half-plane.
                if g[1] < 0.0 || (g[1] == 0.0 && g[0] < 0.0) {
                    [-g[0], -g[1]]
                } else {
                    [g[0], g[1]]
                }
            })
            .filter(|g| g[0] != 0.0 || g[1] != 0.0)
            .collect();
        let (cx, cy) = (self.center[0], self.center[1]);
        if gens.is_empty() {
            return Some(vec![[cx, cy]]);
        }
        gens.sort_by(|a, b| a[1].atan2(a[0]).total_cmp(&b[1].atan2(b[0])));
        // Lowest vertex: subtract every (upper half-plane) generator.
        let mut p = [cx, cy];
        for g in &gens {
            p[0] -= g[0];
            p[1] -= g[1];
        }
        let mut out = Vec::with_capacity(2 * gens.len());
        for g in gens.iter() {
            out.push(p);
            p = [p[0] + 2.0 * g[0], p[1] + 2.0 * g[1]];
        }
        for g in gens.iter() {
            out.push(p);
            p = [p[0] - 2.0 * g[0], p[1] - 2.0 * g[1]];
        }
        Some(out)
    }
}

/// Axis-aligned box `{ x : |x − center| ≤ half_widths }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "BoxJson", try_from = "BoxJson")]
pub struct BoxSet {
    pub center: Vector,
    pub half_widths: Vector,
}

#[derive(Serialize, Deserialize)]
struct BoxJson {
    center: Vec<f64>,
    half_widths: Vec<f64>,
}

impl From<BoxSet> for BoxJson {
    fn from(b: BoxSet) -> Self {
        Self {
            center: b.center.iter().copied().collect(),
            half_widths: b.half_widths.iter().copied().collect(),
        }
    }
}

impl TryFrom<BoxJson> for BoxSet {
    type Error = InvariantError;

    fn try_from(raw: BoxJson) -> Result<Self, Self::Error> {
        BoxSet::new(Vector::from_vec(raw.center), Vector::from_vec(raw.half_widths))
    }
}

impl BoxSet {
    pub fn new(center: Vector, half_widths: Vector) -> Result<Self, InvariantError> {
        if center.len() != half_widths.len() {
            return Err(InvariantError::Dimension("box center vs half widths".into()));
        }
        if half_widths.iter().any(|r| !(*r >= 0.0)) || center.iter().any(|c| !c.is_finite()) {
            return Err(InvariantError::InvalidBox);
        }
        Ok(Self { center, half_widths })
    }

    pub fn centered(half_widths: Vector) -> Result<Self, InvariantError> {
        Self::new(Vector::zeros(half_widths.len()), half_widths)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, x: &Vector) -> bool {
        box_contains(self, x)
    }

    pub fn vertices(&self) -> Vec<Vector> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                Vector::from_fn(n, |i, _| {
                    let s = if mask & (1 << i) != 0 { 1.0 } else { -1.0 };
                    self.center[i] + s * self.half_widths[i]
                })
            })
            .collect()
    }
}

pub const MEMBERSHIP_TOL: f64 = 1e-9;

pub fn box_contains(b: &BoxSet, x: &Vector) -> bool {
    x.len() == b.dim()
        && (0..x.len()).all(|i| (x[i] - b.center[i]).abs() - b.half_widths[i] <= MEMBERSHIP_TOL)
}

/// H-representation of `{Fx ≤ g} ⊕ box`: `F x ≤ g + F c + |F| r`.
pub fn inflate_polyhedron(f: &Matrix, g: &Vector, b: &BoxSet) -> (Matrix, Vector) {
    let grown = g + f * &b.center + abs(f) * &b.half_widths;
    (f.clone(), grown)
}
