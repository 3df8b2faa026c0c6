//! Steady-state tight formation planning.
//!
//! Finds target positions `p*` with the leader pinned at an anchor `p̄` that
//! minimize `z*ᵀQ_z z*`, `z* = H̃p*`, while every edge keeps some axis of its
//! displacement beyond the edge's error bound and every agent stays clear of
//! every obstacle inflated by that agent's own error box.
//!
//! Each constraint of the second and third kind is a disjunction: one big-M
//! binary per option, at least one set. The search is best-first
//! branch-and-bound over those binaries. A node's relaxation is the QP over
//! follower positions in which options fixed to one are hard constraints and
//! undecided disjunctions are dropped, the `M → ∞` limit of the big-M
//! relaxation. A relaxation whose minimizer already satisfies every
//! disjunction is optimal for its subtree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closedloop::ClosedLoop;
use crate::invariants::{inflate_polyhedron, BoxSet};
use crate::matcore::{abs, kron, qp_solve, qp_solve_from, Matrix, QpError, QpProblem, Vector};
use crate::topology::{incidence, FormationGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormationError {
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("node budget of {0} exhausted before any feasible formation was found")]
    BudgetExhausted(usize),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Bounded polyhedron `{ x : Fx ≤ g }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObstacleJson", into = "ObstacleJson")]
pub struct Obstacle {
    pub f: Matrix,
    pub g: Vector,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ObstacleJson {
    Halfspaces {
        #[serde(rename = "F")]
        f: Vec<Vec<f64>>,
        g: Vec<f64>,
    },
    Rect {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

impl TryFrom<ObstacleJson> for Obstacle {
    type Error = FormationError;

    fn try_from(raw: ObstacleJson) -> Result<Self, FormationError> {
        match raw {
            ObstacleJson::Halfspaces { f, g } => {
                let cols = f.first().map_or(0, Vec::len);
                if f.iter().any(|r| r.len() != cols) {
                    return Err(FormationError::Invalid("ragged obstacle matrix".into()));
                }
                Obstacle::new(crate::matcore::from_rows(&f), Vector::from_vec(g))
            }
            ObstacleJson::Rect { lo, hi } => Obstacle::rect(&Vector::from_vec(lo), &Vector::from_vec(hi)),
        }
    }
}

impl From<Obstacle> for ObstacleJson {
    fn from(o: Obstacle) -> Self {
        ObstacleJson::Halfspaces {
            f: crate::matcore::to_rows(&o.f),
            g: o.g.iter().copied().collect(),
        }
    }
}

impl Obstacle {
    pub fn new(f: Matrix, g: Vector) -> Result<Self, FormationError> {
        if f.nrows() != g.len() || f.nrows() == 0 || f.ncols() == 0 {
            return Err(FormationError::Invalid("obstacle F and g disagree".into()));
        }
        if !crate::matcore::all_finite(&f) || g.iter().any(|x| !x.is_finite()) {
            return Err(FormationError::Invalid("non-finite obstacle data".into()));
        }
        if (0..f.nrows()).any(|r| f.row(r).norm() == 0.0) {
            return Err(FormationError::Invalid("obstacle has a zero face normal".into()));
        }
        let n = f.ncols();
        for d in 0..n {
            for s in [1.0, -1.0] {
                let mut c = Vector::zeros(n);
                c[d] = -s;
                let lp = QpProblem::new(Matrix::zeros(n, n), c).with_ineq(f.clone(), g.clone());
                match qp_solve(&lp) {
                    Err(QpError::Unbounded) => {
                        return Err(FormationError::Invalid("obstacle polyhedron is unbounded".into()))
                    }
                    Err(QpError::Infeasible { .. }) => {
                        return Err(FormationError::Invalid("obstacle polyhedron is empty".into()))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { f, g })
    }

    /// Axis-aligned box `lo ≤ x ≤ hi`.
    pub fn rect(lo: &Vector, hi: &Vector) -> Result<Self, FormationError> {
        let n = lo.len();
        if hi.len() != n || (0..n).any(|d| !(lo[d] < hi[d])) {
            return Err(FormationError::Invalid("rectangle needs lo < hi".into()));
        }
        let f = kron(&Matrix::identity(n, n), &Matrix::from_column_slice(2, 1, &[1.0, -1.0]));
        let g = Vector::from_fn(2 * n, |r, _| if r % 2 == 0 { hi[r / 2] } else { -lo[r / 2] });
        Self::new(f, g)
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    /// Rows normalized to unit length and offsets grown by `|F̂|·r`.
    pub fn inflated_unit(&self, r: &Vector) -> (Matrix, Vector) {
        let mut f = self.f.clone();
        let mut g = self.g.clone();
        for i in 0..f.nrows() {
            let norm = f.row(i).norm();
            f.row_mut(i).unscale_mut(norm);
            g[i] /= norm;
        }
        let grown = &g + abs(&f) * r;
        (f, grown)
    }

    /// Vertices of a planar obstacle in counter-clockwise order.
    pub fn vertices_2d(&self) -> Vec<[f64; 2]> {
        if self.dim() != 2 {
            return Vec::new();
        }
        let m = self.f.nrows();
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for i in 0..m {
            for j in (i + 1)..m {
                let (a, b, c, d) = (self.f[(i, 0)], self.f[(i, 1)], self.f[(j, 0)], self.f[(j, 1)]);
                let det = a * d - b * c;
                if det.abs() < 1e-12 {
                    continue;
                }
                let x = (self.g[i] * d - b * self.g[j]) / det;
                let y = (a * self.g[j] - self.g[i] * c) / det;
                let tol = 1e-9 * (1.0 + x.abs() + y.abs());
                let inside = (0..m).all(|k| self.f[(k, 0)] * x + self.f[(k, 1)] * y <= self.g[k] + tol);
                if inside && !pts.iter().any(|p| (p[0] - x).abs() < tol && (p[1] - y).abs() < tol) {
                    pts.push([x, y]);
                }
            }
        }
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len().max(1) as f64;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / pts.len().max(1) as f64;
        pts.sort_by(|p, q| (p[1] - cy).atan2(p[0] - cx).total_cmp(&(q[1] - cy).atan2(q[0] - cx)));
        pts
    }
}

/// Axis-aligned workspace `lo ≤ p ≤ hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub lo: Vector,
    pub hi: Vector,
}

impl Workspace {
    pub fn new(lo: Vector, hi: Vector) -> Result<Self, FormationError> {
        if lo.len() != hi.len() || lo.is_empty() || (0..lo.len()).any(|d| !(lo[d] < hi[d])) {
            return Err(FormationError::Invalid("workspace needs lo < hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn diameter(&self) -> f64 {
        (&self.hi - &self.lo).norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FormationOptions {
    /// Strictness margin on separation and clearance (m).
    pub margin: f64,
    pub node_budget: usize,
    pub gap_tolerance: f64,
}

impl Default for FormationOptions {
    fn default() -> Self {
        Self {
            margin: 1e-3,
            node_budget: 100_000,
            gap_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TightFormationProblem {
    pub n_agents: usize,
    pub n: usize,
    pub h: Matrix,
    pub anchor: Vector,
    pub q_z: Matrix,
    /// Per-edge, per-axis separation thresholds `|H̃|·r_p`.
    pub thresholds: Vector,
    /// Per-agent, per-axis error box half-widths.
    pub r_p: Vector,
    pub obstacles: Vec<Obstacle>,
    pub workspace: Workspace,
    pub big_m: f64,
    pub options: FormationOptions,
}

/// Thresholds `t = |H⊗Iₙ|·r_p`.
pub fn edge_thresholds(h: &Matrix, r_p: &Vector, n: usize) -> Vector {
    abs(&kron(h, &Matrix::identity(n, n))) * r_p
}

impl TightFormationProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        graph: &FormationGraph,
        n: usize,
        r_p: Vector,
        anchor: Vector,
        q_z: Matrix,
        obstacles: Vec<Obstacle>,
        workspace: Workspace,
        options: FormationOptions,
    ) -> Result<Self, FormationError> {
        let h = incidence(graph);
        let (m, big_n) = h.shape();
        let bad = |s: String| Err(FormationError::Invalid(s));
        if r_p.len() != n * big_n || r_p.iter().any(|r| !(*r >= 0.0)) {
            return bad(format!("error bounds need {} nonnegative entries", n * big_n));
        }
        if anchor.len() != n || workspace.lo.len() != n {
            return bad("anchor and workspace must match the spatial dimension".into());
        }
        if q_z.shape() != (n * m, n * m) {
            return bad(format!("Q_z must be {0}×{0}", n * m));
        }
        if crate::matcore::sym_eig(&q_z).map_or(true, |s| !(s.values[0] > 0.0)) {
            return bad("Q_z must be symmetric positive definite".into());
        }
        if obstacles.iter().any(|o| o.dim() != n) {
            return bad("obstacle dimension differs from n".into());
        }
        if !(options.margin >= 0.0) {
            return bad("margin must be nonnegative".into());
        }
        let thresholds = edge_thresholds(&h, &r_p, n);
        let big_m = 10.0 * workspace.diameter();
        Ok(Self {
            n_agents: big_n,
            n,
            h,
            anchor,
            q_z,
            thresholds,
            r_p,
            obstacles,
            workspace,
            big_m,
            options,
        })
    }

    /// Problem with error boxes from a closed-loop analysis.
    pub fn from_closed_loop(
        cl: &ClosedLoop,
        anchor: Vector,
        q_z: Matrix,
        obstacles: Vec<Obstacle>,
        workspace: Workspace,
        options: FormationOptions,
    ) -> Result<Self, FormationError> {
        Self::new(&cl.graph, cl.n, cl.r_p.clone(), anchor, q_z, obstacles, workspace, options)
    }

    pub fn agent_radius(&self, i: usize) -> Vector {
        self.r_p.rows(i * self.n, self.n).into_owned()
    }

    /// Stacked positions from follower variables.
    pub fn positions(&self, x: &Vector) -> Vector {
        let mut p = Vector::zeros(self.n * self.n_agents);
        p.rows_mut(0, self.n).copy_from(&self.anchor);
        p.rows_mut(self.n, x.len()).copy_from(x);
        p
    }

    pub fn displacements(&self, p: &Vector) -> Vector {
        kron(&self.h, &Matrix::identity(self.n, self.n)) * p
    }

    pub fn objective(&self, p: &Vector) -> f64 {
        let z = self.displacements(p);
        z.dot(&(&self.q_z * &z))
    }
}

/// One option of a disjunction: `a·x ≤ b` over follower variables.
#[derive(Debug, Clone)]
struct Row {
    a: Vector,
    b: f64,
}

#[derive(Debug, Clone)]
struct Disjunction {
    options: Vec<Row>,
}

impl Disjunction {
    fn violation(&self, x: &Vector, k: usize) -> f64 {
        let r = &self.options[k];
        r.a.dot(x) - r.b
    }
}

/// Follower-space QP data and the disjunctions of a problem.
struct Compiled {
    q: Matrix,
    c: Vector,
    constant: f64,
    lower: Vector,
    upper: Vector,
    disjunctions: Vec<Disjunction>,
}

fn compile(p: &TightFormationProblem) -> Result<Compiled, FormationError> {
    let (n, big_n) = (p.n, p.n_agents);
    let nx = n * (big_n - 1);
    let ht = kron(&p.h, &Matrix::identity(n, n));
    let h_lead = ht.columns(0, n).into_owned();
    let h_f = ht.columns(n, nx).into_owned();
    let z0 = &h_lead * &p.anchor;
    let q = (h_f.transpose() * &p.q_z * &h_f) * 2.0;
    let q = (&q + q.transpose()) * 0.5;
    let c = h_f.transpose() * (&p.q_z * &z0) * 2.0;
    let constant = z0.dot(&(&p.q_z * &z0));

    let margin = p.options.margin;
    let mut lower = Vector::zeros(nx);
    let mut upper = Vector::zeros(nx);
    for i in 0..big_n {
        let r = p.agent_radius(i);
        for d in 0..n {
            let (lo, hi) = (p.workspace.lo[d] + r[d], p.workspace.hi[d] - r[d]);
            if lo > hi {
                return Err(FormationError::Infeasible(format!(
                    "workspace is empty for agent {} after shrinking by its error box",
                    i + 1
                )));
            }
            if i == 0 {
                if p.anchor[d] < lo - 1e-12 || p.anchor[d] > hi + 1e-12 {
                    return Err(FormationError::Infeasible(
                        "leader anchor is outside the workspace shrunk by its error box".into(),
                    ));
                }
            } else {
                lower[(i - 1) * n + d] = lo;
                upper[(i - 1) * n + d] = hi;
            }
        }
    }

    let mut disjunctions = Vec::new();
    for (k, _) in (0..p.h.nrows()).enumerate() {
        let mut options = Vec::with_capacity(2 * n);
        for d in 0..n {
            let row = k * n + d;
            let coeff: Vector = h_f.row(row).transpose();
            for s in [1.0, -1.0] {
                // s·(coeff·x + z0) ≥ t + margin
                options.push(Row {
                    a: &coeff * -s,
                    b: s * z0[row] - p.thresholds[row] - margin,
                });
            }
        }
        disjunctions.push(Disjunction { options });
    }
    for (l, obs) in p.obstacles.iter().enumerate() {
        for i in 0..big_n {
            let (f, g) = obs.inflated_unit(&p.agent_radius(i));
            if i == 0 {
                let clear = (0..f.nrows()).any(|r| f.row(r).transpose().dot(&p.anchor) >= g[r] + margin);
                if !clear {
                    return Err(FormationError::Infeasible(format!(
                        "leader anchor lies inside inflated obstacle {}",
                        l + 1
                    )));
                }
                continue;
            }
            let options = (0..f.nrows())
                .map(|r| {
                    // F̂_r p_i ≥ ĝ_r + margin
                    let mut a = Vector::zeros(nx);
                    for d in 0..n {
                        a[(i - 1) * n + d] = -f[(r, d)];
                    }
                    Row { a, b: -g[r] - margin }
                })
                .collect();
            disjunctions.push(Disjunction { options });
        }
    }
    Ok(Compiled {
        q,
        c,
        constant,
        lower,
        upper,
        disjunctions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// Node budget exhausted; the incumbent is returned with its gap.
    Incumbent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightFormationSolution {
    /// Target positions, one row per agent.
    pub p_star: Vec<Vec<f64>>,
    /// Target displacements, one row per edge.
    pub z_star: Vec<Vec<f64>>,
    pub objective: f64,
    /// One entry per disjunction option: edges first (axis-major, `+` then
    /// `−`), then follower/obstacle pairs (face order).
    pub binaries: Vec<Vec<bool>>,
    pub gap: f64,
    pub nodes: usize,
    pub status: SolveStatus,
}

impl TightFormationSolution {
    pub fn stacked_positions(&self) -> Vector {
        Vector::from_iterator(
            self.p_star.iter().map(Vec::len).sum(),
            self.p_star.iter().flatten().copied(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fix {
    Free,
    One,
    Zero,
}

struct Node {
    bound: f64,
    id: usize,
    fixes: Vec<Vec<Fix>>,
    x: Vector,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // Min-heap on (bound, id); bounds equal to roundoff tie, so that the
    // search order does not depend on the scale of the objective.
    fn cmp(&self, other: &Self) -> Ordering {
        let scale = self.bound.abs().max(other.bound.abs());
        let by_bound = if (self.bound - other.bound).abs() <= 1e-9 * scale {
            Ordering::Equal
        } else {
            other.bound.total_cmp(&self.bound)
        };
        by_bound.then_with(|| other.id.cmp(&self.id))
    }
}

const SATISFIED_TOL: f64 = 1e-9;

fn relax(cp: &Compiled, fixes: &[Vec<Fix>], warm: &Vector) -> Result<Option<(Vector, f64)>, FormationError> {
    let mut rows: Vec<&Row> = Vec::new();
    for (dj, fx) in cp.disjunctions.iter().zip(fixes) {
        let free: Vec<usize> = (0..fx.len()).filter(|&k| fx[k] != Fix::Zero).collect();
        if free.is_empty() {
            return Ok(None);
        }
        for k in 0..fx.len() {
            if fx[k] == Fix::One || free.len() == 1 && free[0] == k {
                rows.push(&dj.options[k]);
            }
        }
    }
    let nx = cp.c.len();
    let mut a = Matrix::zeros(rows.len(), nx);
    let mut b = Vector::zeros(rows.len());
    for (r, row) in rows.iter().enumerate() {
        a.set_row(r, &row.a.transpose());
        b[r] = row.b;
    }
    let qp = QpProblem::new(cp.q.clone(), cp.c.clone())
        .with_ineq(a, b)
        .with_bounds(cp.lower.clone(), cp.upper.clone());
    match qp_solve_from(&qp, warm) {
        Ok(sol) => Ok(Some((sol.x, sol.objective + cp.constant))),
        Err(QpError::Infeasible { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Most violated disjunction and its least violated undecided option.
fn branching_choice(cp: &Compiled, fixes: &[Vec<Fix>], x: &Vector) -> Option<(usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for (j, dj) in cp.disjunctions.iter().enumerate() {
        let viol: Vec<f64> = (0..dj.options.len()).map(|k| dj.violation(x, k)).collect();
        let least = viol.iter().copied().fold(f64::INFINITY, f64::min);
        if least <= SATISFIED_TOL {
            continue;
        }
        let option = (0..viol.len())
            .filter(|&k| fixes[j][k] == Fix::Free)
            .min_by(|&a, &b| viol[a].total_cmp(&viol[b]));
        if let Some(k) = option {
            if best.as_ref().is_none_or(|b| least > b.0) {
                best = Some((least, j, k));
            }
        }
    }
    best.map(|(_, j, k)| (j, k))
}

fn all_satisfied(cp: &Compiled, x: &Vector) -> bool {
    cp.disjunctions
        .iter()
        .all(|dj| (0..dj.options.len()).any(|k| dj.violation(x, k) <= SATISFIED_TOL))
}

pub fn solve(p: &TightFormationProblem) -> Result<TightFormationSolution, FormationError> {
    let cp = compile(p)?;
    let budget = p.options.node_budget.max(1);
    let root_fixes: Vec<Vec<Fix>> = cp.disjunctions.iter().map(|d| vec![Fix::Free; d.options.len()]).collect();
    let start = (&cp.lower + &cp.upper) * 0.5;
    let mut nodes = 1;
    let (x0, bound0) = relax(&cp, &root_fixes, &start)?
        .ok_or_else(|| FormationError::Infeasible("workspace and hard constraints admit no formation".into()))?;

    let mut heap = BinaryHeap::new();
    let mut next_id = 1;
    heap.push(Node {
        bound: bound0,
        id: 0,
        fixes: root_fixes,
        x: x0,
    });
    let mut incumbent: Option<(Vector, f64)> = None;
    let mut status = SolveStatus::Optimal;
    let mut lower_bound = bound0;

    while let Some(node) = heap.pop() {
        lower_bound = node.bound;
        if let Some((_, best)) = &incumbent {
            if node.bound >= *best - 1e-9 * best.abs() {
                break;
            }
        }
        if all_satisfied(&cp, &node.x) {
            // Best-first: no open node can beat a feasible relaxation.
            incumbent = Some((node.x.clone(), node.bound));
            break;
        }
        let Some((j, k)) = branching_choice(&cp, &node.fixes, &node.x) else {
            continue;
        };
        for fix in [Fix::One, Fix::Zero] {
            if nodes >= budget {
                status = SolveStatus::Incumbent;
                break;
            }
            let mut fixes = node.fixes.clone();
            fixes[j][k] = fix;
            nodes += 1;
            if let Some((x, bound)) = relax(&cp, &fixes, &node.x)? {
                if all_satisfied(&cp, &x) && incumbent.as_ref().is_none_or(|(_, b)| bound < *b - 1e-9 * b.abs()) {
                    incumbent = Some((x.clone(), bound));
                }
                heap.push(Node {
                    bound,
                    id: next_id,
                    fixes,
                    x,
                });
                next_id += 1;
            }
        }
        if status == SolveStatus::Incumbent {
            lower_bound = heap.peek().map_or(lower_bound, |n| n.bound.min(lower_bound));
            break;
        }
    }

    let (x, objective) = incumbent.ok_or_else(|| {
        if status == SolveStatus::Incumbent {
            FormationError::BudgetExhausted(budget)
        } else {
            FormationError::Infeasible("no placement satisfies the separation and clearance constraints".into())
        }
    })?;
    let gap = if status == SolveStatus::Optimal {
        0.0
    } else {
        ((objective - lower_bound) / objective.abs().max(1e-12)).max(0.0)
    };
    if status == SolveStatus::Incumbent && gap <= p.options.gap_tolerance {
        status = SolveStatus::Optimal;
    }

    let positions = p.positions(&x);
    let z = p.displacements(&positions);
    let n = p.n;
    let binaries = cp
        .disjunctions
        .iter()
        .map(|dj| (0..dj.options.len()).map(|k| dj.violation(&x, k) <= SATISFIED_TOL).collect())
        .collect();
    Ok(TightFormationSolution {
        p_star: (0..p.n_agents).map(|i| positions.rows(i * n, n).iter().copied().collect()).collect(),
        z_star: (0..p.h.nrows()).map(|k| z.rows(k * n, n).iter().copied().collect()).collect(),
        objective: p.objective(&positions),
        binaries,
        gap,
        nodes,
        status,
    })
}

/// Worst margins per constraint family; nonnegative means satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// `‖p₁ − p̄‖∞`.
    pub anchor_error: f64,
    /// `min_k max_{d,s} (s·z_{k,d} − t_{k,d})`.
    pub edge_margin: f64,
    /// `min_{i,ℓ} max_f (F̂_f p_i − ĝ_f)` against obstacles inflated by `r_i`.
    pub obstacle_margin: f64,
    /// Smallest distance of an error box to the workspace boundary.
    pub workspace_margin: f64,
    /// `‖z* − H̃p*‖∞`.
    pub consistency_error: f64,
    pub passed: bool,
}

pub const VERIFY_TOL: f64 = 1e-7;

/// Re-checks a solution from the original problem data, without binaries.
pub fn verify(sol: &TightFormationSolution, p: &TightFormationProblem) -> VerificationReport {
    let n = p.n;
    let pos = sol.stacked_positions();
    let agent = |i: usize| pos.rows(i * n, n).into_owned();
    let anchor_error = (agent(0) - &p.anchor).amax();

    let z = p.displacements(&pos);
    let z_reported = Vector::from_iterator(z.len(), sol.z_star.iter().flatten().copied());
    let consistency_error = if z_reported.len() == z.len() {
        (&z - &z_reported).amax()
    } else {
        f64::INFINITY
    };

    let mut edge_margin = f64::INFINITY;
    for k in 0..p.h.nrows() {
        let best = (0..n)
            .map(|d| z[k * n + d].abs() - p.thresholds[k * n + d])
            .fold(f64::NEG_INFINITY, f64::max);
        edge_margin = edge_margin.min(best);
    }

    let mut obstacle_margin = f64::INFINITY;
    for obs in &p.obstacles {
        for i in 0..p.n_agents {
            let r = BoxSet::centered(p.agent_radius(i)).expect("nonnegative radii");
            let (f, g) = inflate_polyhedron(&obs.f, &obs.g, &r);
            let x = agent(i);
            let best = (0..f.nrows())
                .map(|row| (f.row(row).transpose().dot(&x) - g[row]) / f.row(row).norm())
                .fold(f64::NEG_INFINITY, f64::max);
            obstacle_margin = obstacle_margin.min(best);
        }
    }

    let mut workspace_margin = f64::INFINITY;
    for i in 0..p.n_agents {
        let (x, r) = (agent(i), p.agent_radius(i));
        for d in 0..n {
            workspace_margin = workspace_margin
                .min(x[d] - r[d] - p.workspace.lo[d])
                .min(p.workspace.hi[d] - x[d] - r[d]);
        }
    }

    let passed = anchor_error <= 1e-6
        && consistency_error <= 1e-9
        && edge_margin >= -VERIFY_TOL
        && obstacle_margin >= -VERIFY_TOL
        && workspace_margin >= -VERIFY_TOL;
    VerificationReport {
        anchor_error,
        edge_margin,
        obstacle_margin,
        workspace_margin,
        consistency_error,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedloop::{ClosedLoop, Gains, NoiseBounds};
    use crate::matcore::from_rows;
    use crate::topology::lff;

    fn open_space() -> Workspace {
        Workspace::new(Vector::from_vec(vec![-50.0, -50.0]), Vector::from_vec(vec![50.0, 50.0])).unwrap()
    }

    fn problem(graph: &FormationGraph, r: f64, obstacles: Vec<Obstacle>, options: FormationOptions) -> TightFormationProblem {
        let n = 2;
        let m = graph.n_edges();
        TightFormationProblem::new(
            graph,
            n,
            Vector::from_element(n * graph.n_agents(), r),
            Vector::from_vec(vec![0.0, 0.0]),
            Matrix::identity(n * m, n * m),
            obstacles,
            open_space(),
            options,
        )
        .unwrap()
    }

    #[test]
    fn rect_obstacle_and_inflation() {
        let o = Obstacle::rect(&Vector::from_vec(vec![0.0, 0.0]), &Vector::from_vec(vec![1.0, 1.0])).unwrap();
        let (f, g) = o.inflated_unit(&Vector::from_vec(vec![0.5, 0.5]));
        assert_eq!(f, o.f);
        assert_eq!(g, Vector::from_vec(vec![1.5, 0.5, 1.5, 0.5]));
        assert_eq!(o.vertices_2d().len(), 4);
        let unbounded = Obstacle::new(from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), Vector::from_vec(vec![1.0, 1.0]));
        assert!(unbounded.is_err());
        let json = serde_json::to_string(&o).unwrap();
        let back: Obstacle = serde_json::from_str(&json).unwrap();
        assert_eq!(back, o);
        let rect: Obstacle = serde_json::from_str(r#"{"lo":[0,0],"hi":[1,1]}"#).unwrap();
        assert_eq!(rect, o);
    }

    #[test]
    fn zero_thresholds_collapse_onto_anchor() {
        let g = lff(4).unwrap();
        let p = problem(
            &g,
            0.0,
            vec![],
            FormationOptions {
                margin: 0.0,
                ..FormationOptions::default()
            },
        );
        let sol = solve(&p).unwrap();
        assert!(sol.objective.abs() < 1e-12);
        for row in &sol.p_star {
            assert!(row.iter().all(|x| x.abs() < 1e-9));
        }
        assert!(verify(&sol, &p).passed);
    }

    #[test]
    fn thresholds_follow_incidence() {
        let g = lff(2).unwrap();
        let t = edge_thresholds(&incidence(&g), &Vector::from_vec(vec![0.3, 0.3]), 1);
        assert_eq!(t, Vector::from_vec(vec![0.6]));
        let cl = ClosedLoop::analyze(
            &lff(4).unwrap(),
            1.0,
            Gains::new(0.31, 3.15).unwrap(),
            2,
            &NoiseBounds::uniform(5, 2, 0.1, 0.05).unwrap(),
        )
        .unwrap();
        let p = TightFormationProblem::from_closed_loop(
            &cl,
            Vector::from_vec(vec![0.0, 0.0]),
            Matrix::identity(10, 10),
            vec![],
            open_space(),
            FormationOptions::default(),
        )
        .unwrap();
        assert!(p.thresholds.iter().all(|t| *t > 0.0));
        let zero = ClosedLoop::analyze(
            &lff(4).unwrap(),
            1.0,
            Gains::new(0.31, 3.15).unwrap(),
            2,
            &NoiseBounds::uniform(5, 2, 0.0, 0.0).unwrap(),
        )
        .unwrap();
        assert!(zero.r_p.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn separated_formation_is_cycle_consistent() {
        let g = lff(4).unwrap();
        let p = problem(&g, 0.5, vec![], FormationOptions::default());
        let sol = solve(&p).unwrap();
        let report = verify(&sol, &p);
        assert!(report.passed, "{report:?}");
        assert!(report.edge_margin >= 1e-3 - 1e-9);
        // LFF triangles: edges (1,2),(1,3),(2,3) and (2,3),(2,4),(3,4).
        let z = &sol.z_star;
        for d in 0..2 {
            assert!((z[0][d] - z[1][d] + z[2][d]).abs() < 1e-10);
            assert!((z[2][d] - z[3][d] + z[4][d]).abs() < 1e-10);
        }
    }

    #[test]
    fn obstacle_next_to_anchor_is_avoided() {
        let g = lff(3).unwrap();
        let o = Obstacle::rect(&Vector::from_vec(vec![0.5, -3.0]), &Vector::from_vec(vec![3.0, 3.0])).unwrap();
        let p = problem(&g, 0.2, vec![o], FormationOptions::default());
        let sol = solve(&p).unwrap();
        let report = verify(&sol, &p);
        assert!(report.passed, "{report:?}");
        assert!(report.obstacle_margin >= 1e-3 - 1e-9);
    }

    #[test]
    fn infeasible_anchor() {
        let g = lff(3).unwrap();
        let o = Obstacle::rect(&Vector::from_vec(vec![-1.0, -1.0]), &Vector::from_vec(vec![1.0, 1.0])).unwrap();
        let p = problem(&g, 0.2, vec![o], FormationOptions::default());
        assert!(matches!(solve(&p), Err(FormationError::Infeasible(_))));
    }

    #[test]
    fn verify_flags_agent_inside_obstacle() {
        let g = lff(3).unwrap();
        let o = Obstacle::rect(&Vector::from_vec(vec![2.0, -1.0]), &Vector::from_vec(vec![4.0, 1.0])).unwrap();
        let p = problem(&g, 0.1, vec![o], FormationOptions::default());
        let mut sol = solve(&p).unwrap();
        assert!(verify(&sol, &p).passed);
        sol.p_star[2] = vec![3.0, 0.0];
        let pos = sol.stacked_positions();
        let z = p.displacements(&pos);
        sol.z_star = (0..g.n_edges()).map(|k| vec![z[2 * k], z[2 * k + 1]]).collect();
        let report = verify(&sol, &p);
        assert!(!report.passed);
        assert!(report.obstacle_margin < 0.0);
    }

    #[test]
    fn objective_grows_with_thresholds() {
        let g = lff(4).unwrap();
        let o = Obstacle::rect(&Vector::from_vec(vec![-4.0, 1.0]), &Vector::from_vec(vec![4.0, 3.0])).unwrap();
        let mut last = 0.0;
        for r in [0.0, 0.1, 0.2, 0.4, 0.8] {
            let p = problem(&g, r, vec![o.clone()], FormationOptions::default());
            let sol = solve(&p).unwrap();
            assert!(verify(&sol, &p).passed);
            assert!(sol.objective >= last - 1e-9);
            last = sol.objective;
        }
    }

    #[test]
    fn scaling_q_keeps_argmin() {
        let g = lff(4).unwrap();
        let o = Obstacle::rect(&Vector::from_vec(vec![1.0, -2.0]), &Vector::from_vec(vec![3.0, 2.0])).unwrap();
        let base = problem(&g, 0.3, vec![o.clone()], FormationOptions::default());
        let s1 = solve(&base).unwrap();
        let mut scaled = base.clone();
        scaled.q_z *= 7.5;
        let s2 = solve(&scaled).unwrap();
        assert!((s1.stacked_positions() - s2.stacked_positions()).amax() < 1e-8);
        assert!((s2.objective - 7.5 * s1.objective).abs() < 1e-8 * s2.objective.max(1.0));
    }

    #[test]
    fn workspace_shrinks_by_error_box() {
        let g = lff(3).unwrap();
        let mut p = problem(&g, 0.0, vec![], FormationOptions::default());
        p.workspace = Workspace::new(Vector::from_vec(vec![0.0, 0.0]), Vector::from_vec(vec![1.0, 1.0])).unwrap();
        p.r_p = Vector::from_element(6, 0.6);
        p.anchor = Vector::from_vec(vec![0.5, 0.5]);
        assert!(matches!(solve(&p), Err(FormationError::Infeasible(_))));
    }
}
