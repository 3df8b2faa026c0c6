//! Gain synthesis: minimize the closed-form invariant-set volume over
//! `(k_p, k_v)` subject to a real closed-loop spectrum and an eigenvalue
//! corridor `μ̲ ≤ μ_{i,±} ≤ μ̄` on both roots of every mode.
//!
//! The search runs in log-gain space: a log-spaced grid (evaluated in
//! parallel) seeds a penalized Nelder–Mead, and a feasible-only compass
//! search then settles the point onto the active constraints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closedloop::{
    log_volume_closed_form, node_noise_bound, ClosedLoop, ClosedLoopError, Gains, NoiseBounds, DISCRIMINANT_MARGIN,
};
use crate::invariants::log_volume_paper;
use crate::matcore::{abs, sym_eig, Vector};
use crate::topology::{incidence, laplacian, modified_laplacian, FormationGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("infeasible corridor: no grid point satisfies the spectral constraints")]
    InfeasibleCorridor,
    #[error("invalid synthesis specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    ClosedLoop(#[from] ClosedLoopError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisOptions {
    /// Search box, applied to both `k_p` and `k_v`.
    pub gain_min: f64,
    pub gain_max: f64,
    pub grid: usize,
    pub iterations: usize,
    pub penalty: f64,
    pub margin: f64,
    /// Run the compass-search polish after Nelder–Mead.
    pub polish: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            gain_min: 1e-3,
            gain_max: 1e2,
            grid: 60,
            iterations: 200,
            penalty: 1e6,
            margin: DISCRIMINANT_MARGIN,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSpec {
    pub lambdas: Vector,
    pub corridor: Corridor,
    pub d: Vector,
    pub n: usize,
    pub options: SynthesisOptions,
}

impl SynthesisSpec {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        let c = self.corridor;
        let o = &self.options;
        let bad = |m: &str| Err(SynthesisError::InvalidSpec(m.into()));
        if !(c.lower < c.upper && c.upper < 0.0) {
            return bad("corridor must satisfy lower < upper < 0");
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l > 0.0)) {
            return bad("Laplacian eigenvalues must be positive");
        }
        if self.d.len() != self.lambdas.len() {
            return bad("d and eigenvalues differ in length");
        }
        if !(o.gain_min > 0.0 && o.gain_min < o.gain_max && o.gain_max.is_finite()) {
            return bad("search box must be positive and nonempty");
        }
        if o.grid < 2 || self.n == 0 {
            return bad("grid needs at least two points per axis and n ≥ 1");
        }
        Ok(())
    }

    pub fn log_volume(&self, gains: Gains) -> Result<f64, ClosedLoopError> {
        log_volume_closed_form(gains, &self.lambdas, &self.d, self.n)
    }
}

/// Per-mode slacks; a constraint holds when its slack is nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// `Δ_i − margin·(k_vλ_i)²`.
    pub discriminant: Vec<f64>,
    /// `μ̄ − μ_{i,+}`.
    pub upper: Vec<f64>,
    /// `μ_{i,−} − μ̲`.
    pub lower: Vec<f64>,
}

impl Margins {
    pub fn worst(&self) -> f64 {
        self.discriminant
            .iter()
            .chain(&self.upper)
            .chain(&self.lower)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// First violated constraint as `(family, mode)`.
    pub fn violated(&self) -> Option<(&'static str, usize)> {
        for (name, v) in [
            ("discriminant", &self.discriminant),
            ("upper", &self.upper),
            ("lower", &self.lower),
        ] {
            if let Some(i) = v.iter().position(|s| !(*s >= 0.0)) {
                return Some((name, i));
            }
        }
        None
    }

    /// Constraints whose slack is within `tol` of zero.
    pub fn active(&self, tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("discriminant", &self.discriminant),
            ("upper", &self.upper),
            ("lower", &self.lower),
        ] {
            for (i, s) in v.iter().enumerate() {
                if s.abs() <= tol {
                    out.push(format!("{name}[{i}]"));
                }
            }
        }
        out
    }

    /// Sum of squared normalized violations.
    fn violation(&self, spec: &SynthesisSpec, gains: Gains) -> f64 {
        let scale_mu = spec.corridor.lower.abs();
        let mut v = 0.0;
        for (i, &l) in spec.lambdas.iter().enumerate() {
            let disc_scale = (gains.kv * l).powi(2).max(1e-300);
            v += (self.discriminant[i].min(0.0) / disc_scale).powi(2);
            v += (self.upper[i].min(0.0) / scale_mu).powi(2);
            v += (self.lower[i].min(0.0) / scale_mu).powi(2);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    pub margins: Margins,
}

pub fn feasible(gains: Gains, spec: &SynthesisSpec) -> Feasibility {
    let n = spec.lambdas.len();
    let mut margins = Margins {
        discriminant: Vec::with_capacity(n),
        upper: Vec::with_capacity(n),
        lower: Vec::with_capacity(n),
    };
    for &l in spec.lambdas.iter() {
        let disc = gains.discriminant(l);
        margins
            .discriminant
            .push(disc - spec.options.margin * (gains.kv * l).powi(2));
        // Complex pairs share the real part −k_vλ/2.
        let s = disc.max(0.0).sqrt();
        let mu_plus = (-gains.kv * l + s) / 2.0;
        let mu_minus = (-gains.kv * l - s) / 2.0;
        margins.upper.push(spec.corridor.upper - mu_plus);
        margins.lower.push(mu_minus - spec.corridor.lower);
    }
    let real = spec.lambdas.iter().all(|&l| gains.discriminant(l) > 0.0);
    let ok = gains.validate().is_ok() && real && margins.violated().is_none();
    Feasibility { feasible: ok, margins }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub gains: Gains,
    pub log_volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub gains: Gains,
    pub log_volume: f64,
    pub feasible: bool,
    pub margins: Margins,
    pub active: Vec<String>,
    pub grid_best: GridPoint,
    pub feasible_grid_points: usize,
    /// Best feasible objective after each refinement iteration.
    pub history: Vec<f64>,
    /// `μ_{i,+}` then `μ_{i,−}` per mode.
    pub mu: Vec<f64>,
}

impl SynthesisResult {
    pub fn volume(&self) -> f64 {
        self.log_volume.exp()
    }
}

fn log_space(lo: f64, hi: f64, k: usize, count: usize) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (count - 1) as f64).exp()
}

/// Best feasible point of a `count × count` log grid, with the number of
/// feasible points.
pub fn grid_search(spec: &SynthesisSpec, count: usize) -> (Option<GridPoint>, usize) {
    let o = &spec.options;
    let points: Vec<Option<GridPoint>> = (0..count * count)
        .into_par_iter()
        .map(|idx| {
            let gains = Gains {
                kp: log_space(o.gain_min, o.gain_max, idx / count, count),
                kv: log_space(o.gain_min, o.gain_max, idx % count, count),
            };
            if !feasible(gains, spec).feasible {
                return None;
            }
            spec.log_volume(gains)
                .ok()
                .filter(|v| v.is_finite())
                .map(|log_volume| GridPoint { gains, log_volume })
        })
        .collect();
    let n_feasible = points.iter().filter(|p| p.is_some()).count();
    // Sequential reduction keeps ties deterministic.
    let best = points.into_iter().flatten().fold(None::<GridPoint>, |acc, p| match acc {
        Some(a) if a.log_volume <= p.log_volume => Some(a),
        _ => Some(p),
    });
    (best, n_feasible)
}

struct Objective<'a> {
    spec: &'a SynthesisSpec,
    reference: f64,
    best: GridPoint,
}

impl Objective<'_> {
    fn gains(&self, u: [f64; 2]) -> Gains {
        let o = &self.spec.options;
        let clamp = |x: f64| x.exp().clamp(o.gain_min, o.gain_max);
        Gains {
            kp: clamp(u[0]),
            kv: clamp(u[1]),
        }
    }

    /// Penalized objective; records feasible improvements.
    fn eval(&mut self, u: [f64; 2]) -> f64 {
        let gains = self.gains(u);
        let f = feasible(gains, self.spec);
        let out_of_box = (u[0] - gains.kp.ln()).powi(2) + (u[1] - gains.kv.ln()).powi(2);
        if f.feasible && out_of_box == 0.0 {
            if let Ok(v) = self.spec.log_volume(gains) {
                if v.is_finite() {
                    if v < self.best.log_volume {
                        self.best = GridPoint { gains, log_volume: v };
                    }
                    return v;
                }
            }
        }
        self.reference + 1.0 + self.spec.options.penalty * (f.margins.violation(self.spec, gains) + out_of_box)
    }
}

fn nelder_mead(obj: &mut Objective, start: [f64; 2], step: f64, iterations: usize, history: &mut Vec<f64>) {
    let mut simplex = [start, [start[0] + step, start[1]], [start[0], start[1] + step]];
    let mut values = simplex.map(|p| obj.eval(p));
    for _ in 0..iterations {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);

        let centroid = [(simplex[0][0] + simplex[1][0]) / 2.0, (simplex[0][1] + simplex[1][1]) / 2.0];
        let along = |t: f64| {
            [
                centroid[0] + t * (simplex[2][0] - centroid[0]),
                centroid[1] + t * (simplex[2][1] - centroid[1]),
            ]
        };
        let reflected = along(-1.0);
        let fr = obj.eval(reflected);
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = obj.eval(expanded);
            if fe < fr {
                simplex[2] = expanded;
                values[2] = fe;
            } else {
                simplex[2] = reflected;
                values[2] = fr;
            }
        } else if fr < values[1] {
            simplex[2] = reflected;
            values[2] = fr;
        } else {
            let (contracted, fc) = if fr < values[2] {
                let c = along(-0.5);
                (c, obj.eval(c))
            } else {
                let c = along(0.5);
                (c, obj.eval(c))
            };
            if fc < values[2].min(fr) {
                simplex[2] = contracted;
                values[2] = fc;
            } else {
                for k in 1..3 {
                    simplex[k] = [
                        simplex[0][0] + 0.5 * (simplex[k][0] - simplex[0][0]),
                        simplex[0][1] + 0.5 * (simplex[k][1] - simplex[0][1]),
                    ];
                    values[k] = obj.eval(simplex[k]);
                }
            }
        }
        history.push(obj.best.log_volume);
        let spread = (values[2] - values[0]).abs();
        let size = (1..3)
            .map(|k| (simplex[k][0] - simplex[0][0]).abs().max((simplex[k][1] - simplex[0][1]).abs()))
            .fold(0.0, f64::max);
        if spread < 1e-14 && size < 1e-12 {
            break;
        }
    }
}

/// Feasible-only pattern search over eight directions with step halving.
fn compass(obj: &mut Objective, step: f64, history: &mut Vec<f64>) {
    let dirs: [[f64; 2]; 8] = [
        [1.0, 0.0],
        [-1.0, 0.0],
        [0.0, 1.0],
        [0.0, -1.0],
        [1.0, 1.0],
        [-1.0, -1.0],
        [1.0, -1.0],
        [-1.0, 1.0],
    ];
    let mut h = step;
    while h > 1e-12 {
        let base = obj.best.clone();
        let u = [base.gains.kp.ln(), base.gains.kv.ln()];
        for d in dirs {
            obj.eval([u[0] + h * d[0], u[1] + h * d[1]]);
        }
        if obj.best.log_volume < base.log_volume {
            h *= 1.5;
        } else {
            h *= 0.5;
        }
        history.push(obj.best.log_volume);
    }
}

pub fn synthesize(spec: &SynthesisSpec) -> Result<SynthesisResult, SynthesisError> {
    spec.validate()?;
    let o = &spec.options;
    let (grid_best, n_feasible) = grid_search(spec, o.grid);
    let grid_best = grid_best.ok_or(SynthesisError::InfeasibleCorridor)?;
    let cell = (o.gain_max.ln() - o.gain_min.ln()) / (o.grid - 1) as f64;

    let mut obj = Objective {
        spec,
        reference: grid_best.log_volume,
        best: grid_best.clone(),
    };
    let mut history = vec![grid_best.log_volume];
    if o.iterations > 0 {
        let start = [grid_best.gains.kp.ln(), grid_best.gains.kv.ln()];
        nelder_mead(&mut obj, start, 0.5 * cell, o.iterations, &mut history);
    }
    if o.polish {
        compass(&mut obj, 0.25 * cell, &mut history);
    }

    let gains = obj.best.gains;
    let feas = feasible(gains, spec);
    let mut mu = Vec::with_capacity(2 * spec.lambdas.len());
    let modes: Vec<(f64, f64)> = spec.lambdas.iter().map(|&l| gains.modes(l).unwrap_or((f64::NAN, f64::NAN))).collect();
    mu.extend(modes.iter().map(|m| m.0));
    mu.extend(modes.iter().map(|m| m.1));
    let tol = 1e-6 * spec.corridor.lower.abs();
    Ok(SynthesisResult {
        gains,
        log_volume: obj.best.log_volume,
        feasible: feas.feasible,
        active: feas.margins.active(tol),
        margins: feas.margins,
        grid_best,
        feasible_grid_points: n_feasible,
        history,
        mu,
    })
}

/// Synthesis for a concrete formation, with the result re-evaluated on the
/// physical noise model.
#[derive(Debug, Clone)]
pub struct FormationSynthesis {
    pub spec: SynthesisSpec,
    pub result: SynthesisResult,
    pub closed_loop: ClosedLoop,
    /// `ln` of the set volume formula from the full closed loop.
    pub direct_log_volume: f64,
}

pub fn spec_for_formation(
    graph: &FormationGraph,
    alpha: f64,
    n: usize,
    noise: &NoiseBounds,
    corridor: Corridor,
    options: SynthesisOptions,
) -> Result<SynthesisSpec, SynthesisError> {
    let h = incidence(graph);
    let l_mod = modified_laplacian(&laplacian(graph), alpha).map_err(ClosedLoopError::from)?;
    let eig = sym_eig(&l_mod).map_err(ClosedLoopError::from)?;
    let delta_n = node_noise_bound(&h, noise, n)?;
    let d = abs(&eig.vectors.transpose()) * delta_n;
    Ok(SynthesisSpec {
        lambdas: eig.values,
        corridor,
        d,
        n,
        options,
    })
}

pub fn synthesize_formation(
    graph: &FormationGraph,
    alpha: f64,
    n: usize,
    noise: &NoiseBounds,
    corridor: Corridor,
    options: SynthesisOptions,
) -> Result<FormationSynthesis, SynthesisError> {
    let spec = spec_for_formation(graph, alpha, n, noise, corridor, options)?;
    let result = synthesize(&spec)?;
    let closed_loop = ClosedLoop::analyze_with_margin(graph, alpha, result.gains, n, noise, spec.options.margin)?;
    let direct_log_volume = log_volume_paper(&closed_loop.bounds);
    Ok(FormationSynthesis {
        spec,
        result,
        closed_loop,
        direct_log_volume,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::lff;

    fn lff_spec(corridor: Corridor) -> SynthesisSpec {
        let g = lff(4).unwrap();
        let noise = NoiseBounds::uniform(5, 2, 1.0, 1.0).unwrap();
        spec_for_formation(&g, 1.0, 2, &noise, corridor, SynthesisOptions::default()).unwrap()
    }

    fn default_corridor() -> Corridor {
        Corridor {
            lower: -10.0,
            upper: -0.05,
        }
    }

    fn single_mode(lambda: f64, corridor: Corridor) -> SynthesisSpec {
        SynthesisSpec {
            lambdas: Vector::from_vec(vec![lambda]),
            corridor,
            d: Vector::from_vec(vec![1.0]),
            n: 1,
            options: SynthesisOptions::default(),
        }
    }

    #[test]
    fn hand_feasibility() {
        let spec = single_mode(2.0, default_corridor());
        let f = feasible(Gains::new(0.31, 3.15).unwrap(), &spec);
        assert!(f.feasible);
        assert!((f.margins.upper[0] - 0.05).abs() < 1e-12);
        assert!((f.margins.lower[0] - 3.8).abs() < 1e-12);

        // μ₋ ≈ −k_vλ far below the corridor.
        let f = feasible(Gains::new(1e-3, 50.0).unwrap(), &spec);
        assert!(!f.feasible);
        assert!(f.margins.lower[0] < -80.0);

        let f = feasible(Gains::new(5.0, 1.0).unwrap(), &spec);
        assert!(!f.feasible);
        assert_eq!(f.margins.violated(), Some(("discriminant", 0)));
    }

    #[test]
    fn lff_synthesis_beats_fine_reference_grid() {
        let spec = lff_spec(default_corridor());
        let res = synthesize(&spec).unwrap();
        assert!(res.feasible);
        assert!(res.margins.worst() >= 0.0);
        assert!(res.log_volume <= res.grid_best.log_volume);
        let (reference, _) = grid_search(&spec, 200);
        let reference = reference.unwrap();
        assert!(
            res.log_volume <= reference.log_volume + 1e-12,
            "{} vs {}",
            res.log_volume,
            reference.log_volume
        );
        for w in res.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(!res.active.is_empty());
    }

    #[test]
    fn corridor_without_feasible_points() {
        // Both roots pinned near −5 need a vanishing discriminant.
        let mut spec = single_mode(
            1.0,
            Corridor {
                lower: -5.0 - 1e-9,
                upper: -5.0,
            },
        );
        spec.options.grid = 10;
        assert_eq!(synthesize(&spec), Err(SynthesisError::InfeasibleCorridor));
    }

    #[test]
    fn single_feasible_grid_point_is_returned_without_refinement() {
        // Grid {0.1, 1, 10}² with λ = 1: only (k_p, k_v) = (10, 10) has real
        // roots with μ₊ ≤ −0.2 (μ = −1.127, −8.873).
        let mut spec = single_mode(
            1.0,
            Corridor {
                lower: -9.95,
                upper: -0.2,
            },
        );
        spec.options = SynthesisOptions {
            gain_min: 0.1,
            gain_max: 10.0,
            grid: 3,
            iterations: 0,
            polish: false,
            ..SynthesisOptions::default()
        };
        let (best, count) = grid_search(&spec, 3);
        assert_eq!(count, 1, "{best:?}");
        let res = synthesize(&spec).unwrap();
        assert_eq!(res.gains, best.unwrap().gains);

        spec.options.iterations = 200;
        spec.options.polish = true;
        let refined = synthesize(&spec).unwrap();
        assert!(refined.feasible);
        assert!(refined.log_volume <= res.log_volume);
    }

    #[test]
    fn volume_is_homogeneous_in_d_and_argmin_is_unchanged() {
        let spec = lff_spec(default_corridor());
        let base = synthesize(&spec).unwrap();
        let big_n = spec.lambdas.len() as f64;
        for s in [0.5, 2.0, 10.0] {
            let scaled = SynthesisSpec {
                d: &spec.d * s,
                ..spec.clone()
            };
            let g = base.gains;
            let diff = scaled.log_volume(g).unwrap() - spec.log_volume(g).unwrap();
            assert!((diff - 4.0 * big_n * s.ln()).abs() < 1e-10);
            let res = synthesize(&scaled).unwrap();
            let cell = (1e2f64.ln() - 1e-3f64.ln()) / 59.0;
            assert!((res.gains.kp.ln() - base.gains.kp.ln()).abs() < cell);
            assert!((res.gains.kv.ln() - base.gains.kv.ln()).abs() < cell);
        }
    }

    #[test]
    fn formation_synthesis_re_evaluates_directly() {
        let g = lff(4).unwrap();
        let noise = NoiseBounds::uniform(5, 2, 0.1, 0.05).unwrap();
        let out = synthesize_formation(&g, 1.0, 2, &noise, default_corridor(), SynthesisOptions::default()).unwrap();
        assert!(out.direct_log_volume.is_finite());
        assert!(out.closed_loop.r_p.iter().all(|r| *r > 0.0));
        let f = feasible(out.result.gains, &out.spec);
        assert!(f.feasible);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = single_mode(1.0, default_corridor());
        spec.corridor = Corridor { lower: -1.0, upper: -2.0 };
        assert!(matches!(synthesize(&spec), Err(SynthesisError::InvalidSpec(_))));
        let mut spec = single_mode(1.0, default_corridor());
        spec.lambdas[0] = 0.0;
        assert!(matches!(synthesize(&spec), Err(SynthesisError::InvalidSpec(_))));
    }
}
