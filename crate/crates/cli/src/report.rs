//! JSON artifacts. Every record re-parses to an equal value; quantities that
//! may be unbounded (a margin over an empty constraint family) are `null`.

use formset_core::closedloop::{ClosedLoopSummary, Gains};
use formset_core::gainsynth::{Corridor, GridPoint, Margins};
use formset_core::invariants::DisturbancePolicy;
use formset_core::simkit::BatchRun;
use formset_core::tightform::{SolveStatus, VerificationReport};
use serde::{Deserialize, Serialize};

pub(crate) fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZonotopeRecord {
    pub center: Vec<f64>,
    pub generators: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpiRun {
    pub start: Vec<f64>,
    pub policy: DisturbancePolicy,
    pub entry_time: Option<f64>,
    pub exits_after_entry: usize,
    pub final_inside: bool,
    pub max_excess_after_entry: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UbReport {
    pub scenario: String,
    pub eigenvalues: Vec<f64>,
    /// Rows of `V`.
    pub eigenvectors: Vec<Vec<f64>>,
    pub bound: Vec<f64>,
    /// Half-widths of `B_UB = |V|b`.
    pub box_half_widths: Vec<f64>,
    pub omega: ZonotopeRecord,
    /// `(2·det V·∏b)²`.
    pub volume_formula: f64,
    /// Lebesgue measure of `Ω`, when computable.
    pub volume_exact: Option<f64>,
    /// `volume_formula / volume_exact`.
    pub volume_ratio: Option<f64>,
    pub settling_horizon: Option<f64>,
    pub all_passed: bool,
    pub runs: Vec<RpiRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainSource {
    Synthesized,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainsReport {
    pub scenario: String,
    pub source: GainSource,
    pub gains: Gains,
    pub corridor: Corridor,
    pub feasible: bool,
    pub margins: Margins,
    pub active: Vec<String>,
    /// `ln` of the closed-form synthesis objective.
    pub log_objective: f64,
    /// `ln` of the set volume formula on the full closed loop.
    pub log_volume: f64,
    pub grid_best: Option<GridPoint>,
    pub feasible_grid_points: Option<usize>,
    pub closed_loop: ClosedLoopSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub anchor_error: f64,
    pub edge_margin: Option<f64>,
    pub obstacle_margin: Option<f64>,
    pub workspace_margin: Option<f64>,
    pub consistency_error: f64,
    pub passed: bool,
}

impl From<&VerificationReport> for Verification {
    fn from(r: &VerificationReport) -> Self {
        Self {
            anchor_error: r.anchor_error,
            edge_margin: finite(r.edge_margin),
            obstacle_margin: finite(r.obstacle_margin),
            workspace_margin: finite(r.workspace_margin),
            consistency_error: r.consistency_error,
            passed: r.passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationReport {
    /// 1-based position in the config's anchor list.
    pub anchor_index: usize,
    pub anchor: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    pub displacements: Vec<Vec<f64>>,
    /// Per-agent position error bound.
    pub radii: Vec<Vec<f64>>,
    /// Per-edge separation thresholds.
    pub thresholds: Vec<Vec<f64>>,
    pub objective: f64,
    pub status: SolveStatus,
    pub nodes: usize,
    pub gap: Option<f64>,
    pub binaries: Vec<Vec<bool>>,
    pub verification: Verification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSimulation {
    pub anchor_index: usize,
    pub anchor: Vec<f64>,
    pub initial_error_norm: f64,
    pub contained: bool,
    pub runs: Vec<BatchRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: String,
    pub gains: Gains,
    pub horizon: f64,
    pub dt: f64,
    pub settle_fraction: f64,
    pub all_contained: bool,
    pub anchors: Vec<AnchorSimulation>,
    pub csv_files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub ub: Option<UbReport>,
    pub gains: GainsReport,
    pub formations: Vec<FormationReport>,
    pub simulation: SimulationReport,
}
