//! Sampled-trajectory verification of robust positive invariance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{InvariantError, UltimateBounds, Zonotope};
use crate::matcore::{Matrix, Vector};
use crate::ode::{affine_into, Rk4};

/// How the disturbance is drawn at each integration step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbancePolicy {
    /// Generator weights uniform in `[-1, 1]`.
    Uniform,
    /// Generator weights uniform in `{-1, 1}`.
    Vertex,
    /// Vertex pushing the currently most critical modal coordinate outward.
    Adversarial,
    /// Uniform on even-numbered trajectories, vertex on odd ones.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpiOptions {
    pub dt: f64,
    pub horizon: f64,
    pub n_points: usize,
    pub seed: u64,
    pub policy: DisturbancePolicy,
    /// Absolute tolerance on `|V⁻¹x| − b` when judging membership.
    pub tolerance: f64,
    /// Keep every k-th state in the recorded path; 0 records nothing.
    pub record_every: usize,
}

impl Default for RpiOptions {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            horizon: 5.0,
            n_points: 5,
            seed: 0,
            policy: DisturbancePolicy::Alternating,
            tolerance: 1e-6,
            record_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpiTrajectory {
    pub start: Vec<f64>,
    pub policy: DisturbancePolicy,
    pub entry_time: Option<f64>,
    pub exits_after_entry: usize,
    pub final_state: Vec<f64>,
    pub final_inside: bool,
    /// Largest `|V⁻¹x| − b` seen after entry.
    pub max_excess_after_entry: f64,
    pub path: Vec<Vec<f64>>,
}

impl RpiTrajectory {
    pub fn passed(&self) -> bool {
        self.entry_time.is_some() && self.exits_after_entry == 0 && self.final_inside
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpiReport {
    pub trajectories: Vec<RpiTrajectory>,
    pub settling_horizon: f64,
}

impl RpiReport {
    pub fn all_passed(&self) -> bool {
        self.trajectories.iter().all(RpiTrajectory::passed)
    }

    pub fn violations(&self) -> usize {
        self.trajectories.iter().filter(|t| !t.passed()).count()
    }
}

/// Simulates `ẋ = Ax + δ` from `n_points` starts drawn uniformly in `B_UB`.
pub fn rpi_check_sampled(
    a: &Matrix,
    disturbance: &Zonotope,
    ub: &UltimateBounds,
    opts: &RpiOptions,
) -> Result<RpiReport, InvariantError> {
    let hw = ub.bounding_box().half_widths;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let starts: Vec<Vector> = (0..opts.n_points)
        .map(|_| Vector::from_fn(hw.len(), |i, _| rng.random_range(-1.0..=1.0) * hw[i]))
        .collect();
    rpi_check_from(a, disturbance, ub, &starts, opts)
}

/// As [`rpi_check_sampled`] with explicit initial states.
pub fn rpi_check_from(
    a: &Matrix,
    disturbance: &Zonotope,
    ub: &UltimateBounds,
    starts: &[Vector],
    opts: &RpiOptions,
) -> Result<RpiReport, InvariantError> {
    let n = ub.dim();
    if a.shape() != (n, n) || disturbance.dim() != n || starts.iter().any(|s| s.len() != n) {
        return Err(InvariantError::Dimension("rpi check operands disagree".into()));
    }
    let rate = ub.spectral.values.amax();
    if !(opts.dt > 0.0) || opts.dt > 1e-3 / rate {
        return Err(InvariantError::StepTooLarge { dt: opts.dt, rate });
    }
    let settling_horizon = 5.0 / ub.spectral.values.max().abs();
    let steps = (opts.horizon / opts.dt).round() as usize;
    let trajectories = starts
        .par_iter()
        .enumerate()
        .map(|(k, start)| {
            let policy = match opts.policy {
                DisturbancePolicy::Alternating if k % 2 == 0 => DisturbancePolicy::Uniform,
                DisturbancePolicy::Alternating => DisturbancePolicy::Vertex,
                p => p,
            };
            let seed = opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1);
            simulate(a, disturbance, ub, start, policy, steps, seed, opts)
        })
        .collect();
    Ok(RpiReport {
        trajectories,
        settling_horizon,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    a: &Matrix,
    disturbance: &Zonotope,
    ub: &UltimateBounds,
    start: &Vector,
    policy: DisturbancePolicy,
    steps: usize,
    seed: u64,
    opts: &RpiOptions,
) -> RpiTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = start.len();
    let order = disturbance.order();
    let modal_gen = &ub.v_inv * &disturbance.generators;
    let mut x = start.as_slice().to_vec();
    let mut delta = vec![0.0; n];
    let mut lam = Vector::zeros(order);
    let mut rk = Rk4::new(n);
    let excess = |x: &[f64]| ub.excess(&Vector::from_column_slice(x));

    let mut entry_time = None;
    let mut exits = 0;
    let mut inside = false;
    let mut max_excess = f64::NEG_INFINITY;
    let mut path = Vec::new();
    if excess(&x) <= opts.tolerance {
        entry_time = Some(0.0);
        inside = true;
        max_excess = excess(&x);
    }
    for step in 0..steps {
        if opts.record_every > 0 && step % opts.record_every == 0 {
            path.push(x.clone());
        }
        match policy {
            DisturbancePolicy::Uniform => lam.iter_mut().for_each(|l| *l = rng.random_range(-1.0..=1.0)),
            DisturbancePolicy::Vertex | DisturbancePolicy::Alternating => lam
                .iter_mut()
                .for_each(|l| *l = if rng.random::<bool>() { 1.0 } else { -1.0 }),
            DisturbancePolicy::Adversarial => {
                let y = ub.modal(&Vector::from_column_slice(&x));
                let critical = (0..n)
                    .max_by(|&i, &j| {
                        let ri = y[i].abs() - ub.bound[i];
                        let rj = y[j].abs() - ub.bound[j];
                        ri.total_cmp(&rj)
                    })
                    .unwrap_or(0);
                let s = if y[critical] < 0.0 { -1.0 } else { 1.0 };
                for j in 0..order {
                    lam[j] = if s * modal_gen[(critical, j)] < 0.0 { -1.0 } else { 1.0 };
                }
            }
        }
        let d = &disturbance.center + &disturbance.generators * &lam;
        delta.copy_from_slice(d.as_slice());
        rk.step(|x, out| affine_into(a, x, &delta, out), &mut x, opts.dt);

        let e = excess(&x);
        let now_inside = e <= opts.tolerance;
        if entry_time.is_some() {
            max_excess = max_excess.max(e);
            if inside && !now_inside {
                exits += 1;
            }
        } else if now_inside {
            entry_time = Some((step + 1) as f64 * opts.dt);
            max_excess = e;
        }
        inside = now_inside;
    }
    if opts.record_every > 0 {
        path.push(x.clone());
    }
    RpiTrajectory {
        start: start.as_slice().to_vec(),
        policy,
        entry_time,
        exits_after_entry: exits,
        final_inside: inside,
        final_state: x,
        max_excess_after_entry: max_excess,
        path,
    }
}
