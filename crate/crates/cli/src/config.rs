//! Scenario configuration, schema `formset/1`.

use std::path::Path;

use formset_core::closedloop::{Gains, NoiseBounds};
use formset_core::gainsynth::{Corridor, SynthesisOptions};
use formset_core::invariants::{DisturbancePolicy, Zonotope};
use formset_core::matcore::{from_rows, Matrix, Vector};
use formset_core::simkit::NoisePolicy;
use formset_core::tightform::{FormationOptions, Obstacle, Workspace};
use formset_core::topology::{lff, FormationGraph};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA: &str = "formset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Base seed; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lti: Option<LtiConfig>,
    #[serde(default)]
    pub formation: Option<FormationConfig>,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

/// Standalone `ẋ = Ax + δ` system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtiConfig {
    pub a: Vec<Vec<f64>>,
    pub disturbance: DisturbanceConfig,
    #[serde(default)]
    pub check: RpiCheckConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DisturbanceConfig {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Zonotope { center: Vec<f64>, generators: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpiCheckConfig {
    pub n_points: usize,
    pub horizon: f64,
    pub dt: f64,
    pub policy: DisturbancePolicy,
}

impl Default for RpiCheckConfig {
    fn default() -> Self {
        Self {
            n_points: 5,
            horizon: 5.0,
            dt: 1e-4,
            policy: DisturbancePolicy::Alternating,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphConfig {
    Lff { lff: usize },
    Explicit(FormationGraph),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseConfig {
    /// Same half-width on every edge and axis.
    Uniform { eps: f64, xi: f64 },
    /// Per-component half-widths, edge-major, with optional centers.
    Explicit {
        eps_bar: Vec<f64>,
        xi_bar: Vec<f64>,
        #[serde(default)]
        eps_center: Option<Vec<f64>>,
        #[serde(default)]
        xi_center: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormationConfig {
    pub graph: GraphConfig,
    #[serde(default = "two")]
    pub dimension: usize,
    pub alpha: f64,
    pub noise: NoiseConfig,
    /// `[μ̲, μ̄]`.
    pub corridor: [f64; 2],
    /// Fixed gains; synthesis is skipped when present.
    #[serde(default)]
    pub gains: Option<Gains>,
    #[serde(default)]
    pub synthesis: SynthesisOptions,
    /// Diagonal of `Q_z`; all ones when absent.
    #[serde(default)]
    pub q_z: Option<Vec<f64>>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub workspace: WorkspaceConfig,
    #[serde(default)]
    pub anchors: Vec<Vec<f64>>,
    #[serde(default)]
    pub options: FormationOptions,
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Seeds per policy.
    pub seeds: usize,
    pub policies: Vec<NoisePolicy>,
    pub settle_fraction: f64,
    /// Half-width of the uniform random offset of the initial state from
    /// the target; 0 starts on target.
    pub initial_offset: f64,
    /// Runs per anchor written as CSV.
    pub csv_runs: usize,
    /// CSV keeps every k-th step.
    pub csv_every: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            horizon: 60.0,
            dt: 1e-3,
            seeds: 20,
            policies: vec![NoisePolicy::Uniform, NoisePolicy::Vertex],
            settle_fraction: 0.5,
            initial_offset: 0.0,
            csv_runs: 1,
            csv_every: 50,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn load(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<ScenarioConfig, CliError> {
    let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix, CliError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(config_err(format!("{what} must be a non-empty rectangular matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(config_err(format!("{what} has non-finite entries")));
    }
    Ok(from_rows(rows))
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema != SCHEMA {
            return Err(config_err(format!("schema must be \"{SCHEMA}\", got \"{}\"", self.schema)));
        }
        if let Some(lti) = &self.lti {
            lti.system()?;
        }
        if let Some(f) = &self.formation {
            f.validate()?;
        }
        let s = &self.simulation;
        if !(s.horizon > 0.0 && s.dt > 0.0 && s.dt < s.horizon) {
            return Err(config_err("simulation needs 0 < dt < horizon"));
        }
        if !(s.settle_fraction > 0.0 && s.settle_fraction <= 1.0) {
            return Err(config_err("settle_fraction must lie in (0, 1]"));
        }
        if s.policies.is_empty() || s.csv_every == 0 || !(s.initial_offset >= 0.0) {
            return Err(config_err("simulation needs policies, csv_every ≥ 1 and initial_offset ≥ 0"));
        }
        Ok(())
    }

    pub fn lti(&self) -> Result<&LtiConfig, CliError> {
        self.lti.as_ref().ok_or_else(|| config_err("config has no \"lti\" section"))
    }

    pub fn formation(&self) -> Result<&FormationConfig, CliError> {
        self.formation
            .as_ref()
            .ok_or_else(|| config_err("config has no \"formation\" section"))
    }
}

impl LtiConfig {
    /// `(A, Δ)`.
    pub fn system(&self) -> Result<(Matrix, Zonotope), CliError> {
        let a = matrix(&self.a, "A")?;
        if !a.is_square() {
            return Err(config_err("A must be square"));
        }
        let n = a.nrows();
        let dist = match &self.disturbance {
            DisturbanceConfig::Box { lo, hi } => {
                if lo.len() != n || hi.len() != n || lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                    return Err(config_err("disturbance box must match A and have lo ≤ hi"));
                }
                let c = Vector::from_fn(n, |i, _| 0.5 * (lo[i] + hi[i]));
                let half = Vector::from_fn(n, |i, _| 0.5 * (hi[i] - lo[i]));
                Zonotope::from_box(c, &half)
            }
            DisturbanceConfig::Zonotope { center, generators } => {
                let g = matrix(generators, "disturbance generators")?;
                Zonotope::new(Vector::from_vec(center.clone()), g)
            }
        }
        .map_err(|e| config_err(format!("disturbance: {e}")))?;
        if dist.dim() != n {
            return Err(config_err("disturbance dimension must match A"));
        }
        let c = &self.check;
        if c.n_points == 0 || !(c.horizon > 0.0) || !(c.dt > 0.0) {
            return Err(config_err("check needs n_points ≥ 1, horizon > 0 and dt > 0"));
        }
        Ok((a, dist))
    }
}

impl FormationConfig {
    pub fn graph(&self) -> Result<FormationGraph, CliError> {
        match &self.graph {
            GraphConfig::Lff { lff: n } => lff(*n).map_err(|e| config_err(e.to_string())),
            GraphConfig::Explicit(g) => Ok(g.clone()),
        }
    }

    pub fn corridor(&self) -> Corridor {
        Corridor {
            lower: self.corridor[0],
            upper: self.corridor[1],
        }
    }

    pub fn noise(&self) -> Result<NoiseBounds, CliError> {
        let m = self.graph()?.n_edges() * self.dimension;
        let v = |x: &[f64]| Vector::from_vec(x.to_vec());
        let r = match &self.noise {
            NoiseConfig::Uniform { eps, xi } => NoiseBounds::uniform(m / self.dimension, self.dimension, *eps, *xi),
            NoiseConfig::Explicit {
                eps_bar,
                xi_bar,
                eps_center,
                xi_center,
            } => {
                if eps_bar.len() != m || xi_bar.len() != m {
                    return Err(config_err(format!("noise vectors need {m} entries")));
                }
                let zero = vec![0.0; m];
                let ec = eps_center.as_deref().unwrap_or(&zero);
                let xc = xi_center.as_deref().unwrap_or(&zero);
                if ec.len() != m || xc.len() != m {
                    return Err(config_err(format!("noise centers need {m} entries")));
                }
                NoiseBounds::new(v(eps_bar), v(xi_bar), v(ec), v(xc))
            }
        };
        r.map_err(|e| config_err(format!("noise: {e}")))
    }

    pub fn q_z(&self) -> Result<Matrix, CliError> {
        let m = self.graph()?.n_edges() * self.dimension;
        let diag = match &self.q_z {
            None => Vector::from_element(m, 1.0),
            Some(d) if d.len() == m && d.iter().all(|w| *w > 0.0 && w.is_finite()) => Vector::from_vec(d.clone()),
            Some(_) => return Err(config_err(format!("q_z needs {m} positive entries"))),
        };
        Ok(Matrix::from_diagonal(&diag))
    }

    pub fn workspace(&self) -> Result<Workspace, CliError> {
        Workspace::new(
            Vector::from_vec(self.workspace.lo.clone()),
            Vector::from_vec(self.workspace.hi.clone()),
        )
        .map_err(|e| config_err(format!("workspace: {e}")))
    }

    pub fn anchor(&self, k: usize) -> Vector {
        Vector::from_vec(self.anchors[k].clone())
    }

    fn validate(&self) -> Result<(), CliError> {
        let n = self.dimension;
        if n == 0 {
            return Err(config_err("dimension must be positive"));
        }
        self.graph()?;
        self.noise()?;
        self.q_z()?;
        let ws = self.workspace()?;
        if ws.lo.len() != n {
            return Err(config_err("workspace dimension mismatch"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(config_err("alpha must be positive"));
        }
        let [lo, hi] = self.corridor;
        if !(lo < hi && hi < 0.0) {
            return Err(config_err("corridor must satisfy lower < upper < 0"));
        }
        if let Some(g) = self.gains {
            g.validate().map_err(|e| config_err(format!("gains: {e}")))?;
        }
        if self.obstacles.iter().any(|o| o.dim() != n) {
            return Err(config_err("obstacle dimension mismatch"));
        }
        if self.anchors.iter().any(|a| a.len() != n || a.iter().any(|v| !v.is_finite())) {
            return Err(config_err("anchor dimension mismatch"));
        }
        Ok(())
    }
}
