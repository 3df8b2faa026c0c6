//! Closed-loop simulation of noisy double-integrator formations.
//!
//! Each agent obeys `p̈_i = u_i` with the PD displacement law driven by
//! measured displacements `z̃ = H̃p + ε` and relative velocities
//! `ζ̃ = H̃v + ξ`, plus a bias pulling the leader onto its reference.
//! Noise is held constant over each integration step.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closedloop::{ClosedLoop, Gains, NoiseBounds};
use crate::matcore::{kron, solve_least_squares, sym_eig, MatError, Matrix, Vector};
use crate::ode::Rk4;
use crate::topology::{incidence, laplacian, modified_laplacian, FormationGraph, GraphError};

/// Largest admissible `dt·|μ|_max`.
pub const MAX_STEP_RATE: f64 = 0.1;
/// Error norm beyond which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;
/// Absolute tolerance for invariance membership.
pub const INVARIANCE_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid options: {0}")]
    Options(String),
    #[error("step {dt} too large for closed-loop rate {rate} (need dt·rate ≤ {MAX_STEP_RATE})")]
    StepTooLarge { dt: f64, rate: f64 },
    #[error("target displacements are not realizable (residual {0:e})")]
    InconsistentTarget(f64),
    #[error("tracking error diverged to {norm:e} at t = {time}")]
    Diverged { time: f64, norm: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Linalg(#[from] MatError),
}

/// How measurement noise is drawn each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    /// Uniform in the noise box.
    Uniform,
    /// Uniform over the box vertices.
    Vertex,
    /// Identically at the box center.
    Zero,
}

impl NoisePolicy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Vertex => "vertex",
            Self::Zero => "zero",
        }
    }
}

/// Trajectory of the leader's target position; all agents share its velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeaderReference {
    Constant { anchor: Vec<f64> },
    Ramp { anchor: Vec<f64>, velocity: Vec<f64> },
}

impl LeaderReference {
    pub fn constant(anchor: &Vector) -> Self {
        Self::Constant {
            anchor: anchor.iter().copied().collect(),
        }
    }

    fn anchor(&self) -> &[f64] {
        match self {
            Self::Constant { anchor } | Self::Ramp { anchor, .. } => anchor,
        }
    }

    fn velocity(&self) -> Vec<f64> {
        match self {
            Self::Constant { anchor } => vec![0.0; anchor.len()],
            Self::Ramp { velocity, .. } => velocity.clone(),
        }
    }
}

/// Everything defining the simulated plant and controller.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub graph: FormationGraph,
    pub alpha: f64,
    pub gains: Gains,
    pub n: usize,
    /// Desired displacements, edge-major (`nM`).
    pub z_star: Vector,
    pub leader: LeaderReference,
    pub noise: NoiseBounds,
    /// Target positions at `t = 0` consistent with `z_star` and the anchor.
    p_star: Vector,
}

impl SimSetup {
    pub fn new(
        graph: &FormationGraph,
        alpha: f64,
        gains: Gains,
        z_star: &Vector,
        leader: LeaderReference,
        noise: &NoiseBounds,
    ) -> Result<Self, SimError> {
        let n = leader.anchor().len();
        let (m, agents) = (graph.n_edges(), graph.n_agents());
        if n == 0 || z_star.len() != n * m || noise.len() != n * m || leader.velocity().len() != n {
            return Err(SimError::Dimension(format!(
                "n = {n}, {m} edges: z* has {}, noise has {}",
                z_star.len(),
                noise.len()
            )));
        }
        modified_laplacian(&laplacian(graph), alpha)?;
        let ht = kron(&incidence(graph), &Matrix::identity(n, n));
        let mut a = Matrix::zeros(n + n * m, n * agents);
        a.view_mut((0, 0), (n, n)).fill_with_identity();
        a.view_mut((n, 0), (n * m, n * agents)).copy_from(&ht);
        let mut b = Vector::zeros(n + n * m);
        b.rows_mut(0, n).copy_from_slice(leader.anchor());
        b.rows_mut(n, n * m).copy_from(z_star);
        let ls = solve_least_squares(&a, &b)?;
        let resid = (&a * &ls.x - &b).amax();
        if resid > 1e-8 * (1.0 + b.amax()) {
            return Err(SimError::InconsistentTarget(resid));
        }
        Ok(Self {
            graph: graph.clone(),
            alpha,
            gains,
            n,
            z_star: z_star.clone(),
            leader,
            noise: noise.clone(),
            p_star: ls.x,
        })
    }

    /// Uses the graph, bias, gains and noise of an analyzed loop.
    pub fn from_closed_loop(cl: &ClosedLoop, z_star: &Vector, leader: LeaderReference) -> Result<Self, SimError> {
        Self::new(&cl.graph, cl.alpha, cl.factorization.gains, z_star, leader, &cl.noise)
    }

    pub fn n_agents(&self) -> usize {
        self.graph.n_agents()
    }

    /// Stacked target `[p*(t); v*]`.
    pub fn target_state(&self, t: f64) -> Vector {
        let nn = self.n * self.n_agents();
        let w = self.leader.velocity();
        Vector::from_fn(2 * nn, |k, _| {
            if k < nn {
                self.p_star[k] + w[k % self.n] * t
            } else {
                w[(k - nn) % self.n]
            }
        })
    }

    /// Largest closed-loop eigenvalue magnitude.
    pub fn fastest_rate(&self) -> Result<f64, SimError> {
        let l = modified_laplacian(&laplacian(&self.graph), self.alpha)?;
        let lambdas = sym_eig(&l)?.values;
        let g = self.gains;
        Ok(lambdas
            .iter()
            .map(|&lam| {
                let lam = lam.max(0.0);
                let disc = g.discriminant(lam);
                if disc >= 0.0 {
                    (g.kv * lam + disc.sqrt()) / 2.0
                } else {
                    (g.kp * lam).sqrt()
                }
            })
            .fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    pub policy: NoisePolicy,
    /// Keep every k-th step (the last step is always kept).
    pub record_every: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            horizon: 60.0,
            dt: 1e-3,
            seed: 0,
            policy: NoisePolicy::Uniform,
            record_every: 1,
        }
    }
}

/// Recorded run. Row `j` holds the state and error at `time[j]`;
/// `noise[j]` is the `[ε; ξ]` applied over the step starting at `time[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n_agents: usize,
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
    pub policy: NoisePolicy,
    pub time: Vec<f64>,
    /// `[p; v]`.
    pub states: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    /// `[e_p; e_v]`.
    pub errors: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.time.last().copied().unwrap_or(0.0)
    }

    pub fn final_error(&self) -> &[f64] {
        self.errors.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// CSV with a `#` metadata line, a header and one row per sample.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "# n_agents={} dim={} dt={} seed={} policy={}",
            self.n_agents,
            self.n,
            self.dt,
            self.seed,
            self.policy.name()
        )?;
        let mut header = vec!["t".to_owned()];
        for prefix in ["p", "v", "e_p", "e_v"] {
            for i in 1..=self.n_agents {
                for d in 1..=self.n {
                    header.push(format!("{prefix}_{i}_{d}"));
                }
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for ((t, x), e) in self.time.iter().zip(&self.states).zip(&self.errors) {
            write!(w, "{t}")?;
            for v in x.iter().chain(e) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Integrates the closed loop from `x0 = [p; v]`.
pub fn simulate(setup: &SimSetup, x0: &Vector, opts: &SimOptions) -> Result<Trajectory, SimError> {
    let n = setup.n;
    let agents = setup.n_agents();
    let nn = n * agents;
    if x0.len() != 2 * nn {
        return Err(SimError::Dimension(format!("x0 has {} entries, expected {}", x0.len(), 2 * nn)));
    }
    if !(opts.horizon > 0.0) || !(opts.dt > 0.0) || !opts.horizon.is_finite() || opts.record_every == 0 {
        return Err(SimError::Options("horizon, dt and record_every must be positive".into()));
    }
    let rate = setup.fastest_rate()?;
    if opts.dt * rate > MAX_STEP_RATE {
        return Err(SimError::StepTooLarge { dt: opts.dt, rate });
    }

    let ht = kron(&incidence(&setup.graph), &Matrix::identity(n, n));
    let nm = ht.nrows();
    let Gains { kp, kv } = setup.gains;
    let alpha = setup.alpha;
    let anchor = setup.leader.anchor().to_vec();
    let w = setup.leader.velocity();
    let z_star = setup.z_star.as_slice();
    let noise = &setup.noise;

    // z̃ − z*, then ζ̃, then the control
    let mut meas = vec![0.0; nm];
    let mut rel_v = vec![0.0; nm];
    let mut eps = vec![0.0; nm];
    let mut xi = vec![0.0; nm];
    let rhs = |x: &[f64], out: &mut [f64], eps: &[f64], xi: &[f64], meas: &mut [f64], rel_v: &mut [f64]| {
        let (p, rest) = x.split_at(nn);
        let (v, t) = rest.split_at(nn);
        let t = t[0];
        for k in 0..nm {
            let row = ht.row(k);
            let (mut zp, mut zv) = (0.0, 0.0);
            for j in 0..nn {
                let h = row[j];
                if h != 0.0 {
                    zp += h * p[j];
                    zv += h * v[j];
                }
            }
            meas[k] = zp + eps[k] - z_star[k];
            rel_v[k] = zv + xi[k];
        }
        out[..nn].copy_from_slice(v);
        let u = &mut out[nn..2 * nn];
        for j in 0..nn {
            let col = ht.column(j);
            let mut acc = 0.0;
            for k in 0..nm {
                let h = col[k];
                if h != 0.0 {
                    acc -= h * (kp * meas[k] + kv * rel_v[k]);
                }
            }
            u[j] = acc;
        }
        for d in 0..n {
            u[d] -= alpha * (kp * (p[d] - anchor[d] - w[d] * t) + kv * (v[d] - w[d]));
        }
        out[2 * nn] = 1.0;
    };

    let steps = (opts.horizon / opts.dt).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rk = Rk4::new(2 * nn + 1);
    let mut x: Vec<f64> = x0.iter().copied().chain(std::iter::once(0.0)).collect();
    let mut traj = Trajectory {
        n_agents: agents,
        n,
        dt: opts.dt,
        seed: opts.seed,
        policy: opts.policy,
        time: Vec::new(),
        states: Vec::new(),
        noise: Vec::new(),
        errors: Vec::new(),
    };
    let error_at = |x: &[f64], t: f64| -> Vec<f64> {
        let target = setup.target_state(t);
        x[..2 * nn].iter().zip(target.iter()).map(|(a, b)| a - b).collect()
    };

    for step in 0..=steps {
        let t = step as f64 * opts.dt;
        let e = error_at(&x, t);
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(SimError::Diverged { time: t, norm });
        }
        let record = step % opts.record_every == 0 || step == steps;
        if record {
            traj.time.push(t);
            traj.states.push(x[..2 * nn].to_vec());
            traj.errors.push(e);
        }
        if step == steps {
            break;
        }
        sample_noise(noise, opts.policy, &mut rng, &mut eps, &mut xi);
        if record {
            traj.noise.push(eps.iter().chain(&xi).copied().collect());
        }
        rk.step(|x, out| rhs(x, out, &eps, &xi, &mut meas, &mut rel_v), &mut x, opts.dt);
        // keep the clock exact rather than accumulated
        x[2 * nn] = (step + 1) as f64 * opts.dt;
    }
    Ok(traj)
}

fn sample_noise(noise: &NoiseBounds, policy: NoisePolicy, rng: &mut ChaCha8Rng, eps: &mut [f64], xi: &mut [f64]) {
    let mut draw = |center: &Vector, half: &Vector, out: &mut [f64]| {
        for k in 0..out.len() {
            let w: f64 = match policy {
                NoisePolicy::Uniform => rng.random_range(-1.0..=1.0),
                NoisePolicy::Vertex => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
                NoisePolicy::Zero => 0.0,
            };
            out[k] = center[k] + half[k] * w;
        }
    };
    draw(&noise.eps_center, &noise.eps_bar, eps);
    draw(&noise.xi_center, &noise.xi_bar, xi);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvarianceStatus {
    Contained,
    Violated,
    /// The window opens before the error can be expected to have settled.
    NotSettled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub status: InvarianceStatus,
    pub window_start: f64,
    /// `5/|μ_slowest|`.
    pub settling_time: f64,
    pub samples: usize,
    /// Samples whose error lies in the invariant set.
    pub inside: usize,
    pub fraction_inside: f64,
    /// Largest `max_i(|V⁻¹e|_i − b_i)` in the window.
    pub max_excess: f64,
    /// Largest `|e_p| − r_p` over agents and axes in the window.
    pub max_position_excess: f64,
}

impl InvarianceReport {
    pub fn passed(&self) -> bool {
        self.status == InvarianceStatus::Contained
    }
}

/// Checks the last `settle_fraction` of `traj` against the invariant set
/// and the per-agent position bounds of `cl`.
pub fn verify_invariance(traj: &Trajectory, cl: &ClosedLoop, settle_fraction: f64) -> Result<InvarianceReport, SimError> {
    if !(settle_fraction > 0.0 && settle_fraction <= 1.0) {
        return Err(SimError::Options(format!("settle fraction {settle_fraction} outside (0, 1]")));
    }
    let nn = cl.n * cl.graph.n_agents();
    if traj.n_agents != cl.graph.n_agents() || traj.n != cl.n || traj.errors.iter().any(|e| e.len() != 2 * nn) {
        return Err(SimError::Dimension("trajectory and closed loop disagree".into()));
    }
    if traj.is_empty() {
        return Err(SimError::Options("empty trajectory".into()));
    }
    let window_start = traj.horizon() * (1.0 - settle_fraction);
    let slowest = cl.factorization.mu_plus.iter().map(|m| m.abs()).fold(f64::INFINITY, f64::min);
    let settling_time = 5.0 / slowest;
    let excess = |e: &[f64]| cl.bounds.excess(&Vector::from_column_slice(e));
    let started_inside = excess(&traj.errors[0]) <= INVARIANCE_TOL;

    let mut samples = 0;
    let mut inside = 0;
    let mut max_excess = f64::NEG_INFINITY;
    let mut max_position_excess = f64::NEG_INFINITY;
    for (t, e) in traj.time.iter().zip(&traj.errors) {
        if *t < window_start - 1e-12 {
            continue;
        }
        samples += 1;
        let ex = excess(e);
        max_excess = max_excess.max(ex);
        let mut pos_ok = true;
        for k in 0..nn {
            let over = e[k].abs() - cl.r_p[k];
            max_position_excess = max_position_excess.max(over);
            pos_ok &= over <= INVARIANCE_TOL;
        }
        if ex <= INVARIANCE_TOL && pos_ok {
            inside += 1;
        }
    }
    let status = if inside == samples {
        InvarianceStatus::Contained
    } else if !started_inside && window_start < settling_time {
        InvarianceStatus::NotSettled
    } else {
        InvarianceStatus::Violated
    };
    Ok(InvarianceReport {
        status,
        window_start,
        settling_time,
        samples,
        inside,
        fraction_inside: inside as f64 / samples.max(1) as f64,
        max_excess,
        max_position_excess,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRun {
    pub seed: u64,
    pub policy: NoisePolicy,
    pub report: InvarianceReport,
    pub final_error_norm: f64,
}

/// Simulates and verifies one run per `(seed, policy)` in parallel,
/// discarding each trajectory once checked.
pub fn invariance_batch(
    setup: &SimSetup,
    cl: &ClosedLoop,
    x0: &Vector,
    opts: &SimOptions,
    runs: &[(u64, NoisePolicy)],
    settle_fraction: f64,
) -> Result<Vec<BatchRun>, SimError> {
    runs.par_iter()
        .map(|&(seed, policy)| {
            let o = SimOptions {
                seed,
                policy,
                ..opts.clone()
            };
            let traj = simulate(setup, x0, &o)?;
            let report = verify_invariance(&traj, cl, settle_fraction)?;
            let final_error_norm = traj.final_error().iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(BatchRun {
                seed,
                policy,
                report,
                final_error_norm,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedloop::error_dynamics;
    use crate::topology::lff;

    fn setup(gains: Gains, eps: f64, xi: f64) -> (SimSetup, ClosedLoop) {
        let g = lff(4).unwrap();
        let noise = NoiseBounds::uniform(g.n_edges(), 2, eps, xi).unwrap();
        let cl = ClosedLoop::analyze(&g, 1.0, gains, 2, &noise).unwrap();
        let shape = [[0.0, 0.0], [-3.0, 1.0], [-3.0, -1.5], [-6.0, 0.5]];
        let z = Vector::from_iterator(
            10,
            g.edges().iter().flat_map(|&(h, t)| (0..2).map(move |d| shape[h][d] - shape[t][d])),
        );
        let s = SimSetup::from_closed_loop(&cl, &z, LeaderReference::constant(&Vector::from_vec(vec![5.0, 2.0]))).unwrap();
        (s, cl)
    }

    fn offset(s: &SimSetup, seed: u64, scale: f64) -> Vector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = s.target_state(0.0);
        x.map(|v| v + scale * rng.random_range(-1.0..1.0))
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn target_matches_displacements() {
        let (s, _) = setup(Gains::new(1.0, 5.0).unwrap(), 0.0, 0.0);
        let x = s.target_state(0.0);
        assert!((x[0] - 5.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
        assert!((x[6] + 1.0).abs() < 1e-12 && (x[7] - 2.5).abs() < 1e-12);
        let bad = Vector::from_element(10, 1.0);
        let r = SimSetup::new(&s.graph, 1.0, s.gains, &bad, s.leader.clone(), &s.noise);
        assert!(matches!(r, Err(SimError::InconsistentTarget(_))));
    }

    #[test]
    fn equilibrium_stays_put() {
        let (s, _) = setup(Gains::new(1.0, 5.0).unwrap(), 0.0, 0.0);
        let x0 = s.target_state(0.0);
        let opts = SimOptions {
            horizon: 2.0,
            dt: 4e-3,
            ..Default::default()
        };
        let tr = simulate(&s, &x0, &opts).unwrap();
        for x in &tr.states {
            for (a, b) in x.iter().zip(x0.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(tr.len(), 501);
        assert_eq!(tr.noise.len(), 500);
    }

    #[test]
    fn zero_noise_decays_within_spectral_envelope() {
        let (s, cl) = setup(Gains::new(1.0, 5.0).unwrap(), 0.0, 0.0);
        let x0 = offset(&s, 3, 2.0);
        let slow = cl.factorization.mu_plus.max();
        let opts = SimOptions {
            horizon: 10.0 / slow.abs(),
            dt: 4e-3,
            ..Default::default()
        };
        let tr = simulate(&s, &x0, &opts).unwrap();
        let spec = cl.factorization.spectral_form();
        let cond = spec.vectors.norm() * spec.inverse_vectors().unwrap().norm();
        let e0 = norm(&tr.errors[0]);
        for (t, e) in tr.time.iter().zip(&tr.errors) {
            assert!(norm(e) <= cond * (slow * t).exp() * e0 * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn error_vanishes_without_noise() {
        let (s, cl) = setup(Gains::new(1.0, 5.0).unwrap(), 0.0, 0.0);
        let slow = cl.factorization.mu_plus.max().abs();
        let spec = cl.factorization.spectral_form();
        let cond = spec.vectors.norm() * spec.inverse_vectors().unwrap().norm();
        let x0 = offset(&s, 9, 0.5);
        let e0 = (&x0 - s.target_state(0.0)).norm();
        // time for the spectral envelope to fall below 1e-9
        let horizon = (cond * e0 / 1e-9).ln() / slow;
        let opts = SimOptions {
            horizon,
            dt: 4e-3,
            ..Default::default()
        };
        let tr = simulate(&s, &x0, &opts).unwrap();
        assert!(norm(tr.final_error()) <= 1e-8);
    }

    #[test]
    fn rk4_error_ratio_under_step_halving() {
        let (s, cl) = setup(Gains::new(1.0, 5.0).unwrap(), 0.0, 0.0);
        let x0 = offset(&s, 1, 3.0);
        let horizon = 2.0;
        let gamma = error_dynamics(
            &modified_laplacian(&laplacian(&s.graph), 1.0).unwrap(),
            s.gains,
            2,
        )
        .unwrap();
        assert_eq!(gamma, cl.gamma);
        let spec = cl.factorization.spectral_form();
        let vinv = spec.inverse_vectors().unwrap();
        let e0 = &x0 - s.target_state(0.0);
        let modal = &vinv * e0;
        let decayed = Vector::from_fn(modal.len(), |i, _| modal[i] * (spec.values[i] * horizon).exp());
        let exact = &spec.vectors * decayed;
        let err = |dt: f64| {
            let opts = SimOptions {
                horizon,
                dt,
                ..Default::default()
            };
            let tr = simulate(&s, &x0, &opts).unwrap();
            (Vector::from_column_slice(tr.final_error()) - &exact).amax()
        };
        let ratio = err(4e-3) / err(2e-3);
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn noisy_runs_stay_contained_after_settling() {
        let (s, cl) = setup(Gains::new(1.0, 5.0).unwrap(), 0.05, 0.02);
        let x0 = s.target_state(0.0);
        let opts = SimOptions {
            horizon: 20.0,
            dt: 4e-3,
            ..Default::default()
        };
        let runs: Vec<_> = (0..6)
            .map(|k| (k as u64, if k % 2 == 0 { NoisePolicy::Uniform } else { NoisePolicy::Vertex }))
            .collect();
        for r in invariance_batch(&s, &cl, &x0, &opts, &runs, 0.5).unwrap() {
            assert!(r.report.passed(), "{r:?}");
            assert_eq!(r.report.fraction_inside, 1.0);
            assert!(r.report.max_position_excess <= INVARIANCE_TOL);
        }
        // a randomly displaced start also settles in
        let tr = simulate(&s, &offset(&s, 4, 1.0), &SimOptions { horizon: 40.0, ..opts }).unwrap();
        assert!(verify_invariance(&tr, &cl, 0.5).unwrap().passed());
    }

    #[test]
    fn deterministic_per_seed() {
        let (s, _) = setup(Gains::new(1.0, 5.0).unwrap(), 0.1, 0.1);
        let opts = SimOptions {
            horizon: 1.0,
            dt: 4e-3,
            seed: 17,
            policy: NoisePolicy::Vertex,
            record_every: 1,
        };
        let x0 = offset(&s, 2, 1.0);
        let a = simulate(&s, &x0, &opts).unwrap();
        assert_eq!(a, simulate(&s, &x0, &opts).unwrap());
        let b = simulate(&s, &x0, &SimOptions { seed: 18, ..opts }).unwrap();
        assert_ne!(a.states, b.states);
        assert!(a.noise.iter().flatten().all(|v| (v.abs() - 0.1).abs() < 1e-15));
    }

    #[test]
    fn slow_gains_are_not_settled() {
        // λ_min(L + e₁e₁ᵀ) ≈ 0.13 for LFF(4); k_p tiny makes μ₊ ≈ −k_p/k_v
        let (s, cl) = setup(Gains::new(0.001, 1.0).unwrap(), 0.05, 0.05);
        let slow = cl.factorization.mu_plus.max();
        assert!(slow > -0.01);
        let opts = SimOptions {
            horizon: 10.0,
            dt: 1e-2,
            ..Default::default()
        };
        let tr = simulate(&s, &offset(&s, 5, 5.0), &opts).unwrap();
        let rep = verify_invariance(&tr, &cl, 0.5).unwrap();
        assert_eq!(rep.status, InvarianceStatus::NotSettled);
        assert!(rep.settling_time > 5.0);
    }

    #[test]
    fn rejects_bad_inputs_and_divergence() {
        let (s, _) = setup(Gains::new(1.0, 5.0).unwrap(), 0.0, 0.0);
        let x0 = s.target_state(0.0);
        let coarse = SimOptions {
            dt: 0.5,
            ..Default::default()
        };
        assert!(matches!(simulate(&s, &x0, &coarse), Err(SimError::StepTooLarge { .. })));
        assert!(matches!(
            simulate(&s, &Vector::zeros(3), &SimOptions::default()),
            Err(SimError::Dimension(_))
        ));
        let mut unstable = s.clone();
        unstable.gains = Gains { kp: -1.0, kv: 1.0 };
        let opts = SimOptions {
            horizon: 100.0,
            dt: 4e-3,
            record_every: 100,
            ..Default::default()
        };
        let r = simulate(&unstable, &offset(&s, 6, 1.0), &opts);
        assert!(matches!(r, Err(SimError::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn ramp_reference_is_tracked() {
        let (s, _) = setup(Gains::new(1.0, 5.0).unwrap(), 0.0, 0.0);
        let ramp = LeaderReference::Ramp {
            anchor: vec![5.0, 2.0],
            velocity: vec![0.5, -0.25],
        };
        let r = SimSetup::new(&s.graph, 1.0, s.gains, &s.z_star, ramp, &s.noise).unwrap();
        let x0 = r.target_state(0.0);
        let tr = simulate(&r, &x0, &SimOptions {
            horizon: 5.0,
            dt: 4e-3,
            ..Default::default()
        }).unwrap();
        assert!(norm(tr.final_error()) < 1e-10);
        assert!((tr.states.last().unwrap()[0] - 7.5).abs() < 1e-9);
    }

    #[test]
    fn csv_layout() {
        let (s, _) = setup(Gains::new(1.0, 5.0).unwrap(), 0.0, 0.0);
        let opts = SimOptions {
            horizon: 0.1,
            dt: 4e-3,
            record_every: 5,
            ..Default::default()
        };
        let tr = simulate(&s, &s.target_state(0.0), &opts).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# n_agents=4 dim=2"));
        assert!(lines[1].starts_with("t,p_1_1,p_1_2,p_2_1"));
        assert_eq!(lines[1].split(',').count(), 1 + 4 * 8);
        assert_eq!(lines.len(), 2 + 6);
        assert_eq!(tr.noise.len(), tr.len() - 1);
    }
}
